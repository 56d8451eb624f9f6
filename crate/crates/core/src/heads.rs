//! Dense segmentation heads: road-surface (ARSS) masks, BEV line classes and
//! perspective-view lanes. All heads share a two-layer 3×3 conv topology and
//! emit channel-last logits `[h·w, K]`.

use std::rc::Rc;

use crate::autograd::{SparseRows, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{bilinear_resize, conv3x3, conv_shifts, init_conv3x3};
use crate::nn::{Bound, Initializer, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRole {
    Arss,
    BevLines,
    PvLanes,
}

impl HeadRole {
    pub fn num_classes(self) -> usize {
        match self {
            HeadRole::Arss => 2,
            HeadRole::BevLines => 3,
            HeadRole::PvLanes => 1,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            HeadRole::Arss => "heads.arss",
            HeadRole::BevLines => "heads.bev_lines",
            HeadRole::PvLanes => "heads.pv_lanes",
        }
    }
}

/// Input of a segmentation head.
#[derive(Clone, Copy)]
pub enum SegInput<'t> {
    Bev {
        x: Var<'t>,
        rows: usize,
        cols: usize,
    },
    Camera {
        x: Var<'t>,
        rows: usize,
        cols: usize,
        image_size: (usize, usize),
    },
}

pub fn init_heads(store: &mut ParamStore, init: &Initializer, c_bev: usize, c_img: usize) {
    for (role, c) in [
        (HeadRole::Arss, c_bev),
        (HeadRole::BevLines, c_bev),
        (HeadRole::PvLanes, c_img),
    ] {
        let p = role.prefix();
        init_conv3x3(store, init, &format!("{p}.conv1"), c, c);
        init_conv3x3(store, init, &format!("{p}.conv2"), c, role.num_classes());
    }
}

fn decoder<'t>(b: &Bound<'t>, role: HeadRole, x: Var<'t>, shifts: &[Rc<SparseRows>]) -> Var<'t> {
    let p = role.prefix();
    let h = conv3x3(b, &format!("{p}.conv1"), x, shifts).gelu();
    conv3x3(b, &format!("{p}.conv2"), h, shifts)
}

/// ARSS logits `[H·W, 2]` (drivable, ped crossing) from BEV features.
pub fn arss_forward<'t>(b: &Bound<'t>, bev: Var<'t>, rows: usize, cols: usize) -> Var<'t> {
    decoder(b, HeadRole::Arss, bev, &conv_shifts(rows, cols))
}

/// Auxiliary heads. `pv_lanes` logits are bilinearly upsampled to the image.
pub fn aux_seg_forward<'t>(b: &Bound<'t>, input: SegInput<'t>, role: HeadRole) -> Result<Var<'t>> {
    match (role, input) {
        (HeadRole::BevLines, SegInput::Bev { x, rows, cols }) => {
            Ok(decoder(b, role, x, &conv_shifts(rows, cols)))
        }
        (
            HeadRole::PvLanes,
            SegInput::Camera {
                x,
                rows,
                cols,
                image_size,
            },
        ) => {
            let logits = decoder(b, role, x, &conv_shifts(rows, cols));
            let up = Rc::new(bilinear_resize((rows, cols), image_size));
            Ok(logits.gather(&up))
        }
        (role, _) => Err(Error::ShapeMismatch(format!(
            "{role:?} head got the wrong input kind"
        ))),
    }
}

/// Hard masks: probability ≥ 0.5, i.e. logit ≥ 0.
pub fn hard_mask(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&l| l >= 0.0).collect()
}
