//! Camera features to a BEV feature grid: pillar projection sampling plus
//! learnable per-cell queries, refined by self-attention over the cells.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{SparseRows, Var};
use crate::error::{Error, Result};
use crate::map_core::{BevGridSpec, CameraParams};
use crate::nn::layers::{
    attention, init_attention, init_layer_norm, init_linear, init_mlp, layer_norm, linear, mlp,
    sinusoidal_2d,
};
use crate::nn::{Bound, Initializer, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevEncoderConfig {
    pub bev_channels: usize,
    /// Heights (m) each cell is lifted to before projection.
    pub pillar_heights: Vec<f64>,
    pub num_refine_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BevEncoderConfig {
    fn default() -> Self {
        BevEncoderConfig {
            bev_channels: 32,
            pillar_heights: vec![-1.0, 0.0, 1.0],
            num_refine_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
        }
    }
}

impl BevEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pillar_heights.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one pillar height is required".into(),
            ));
        }
        if self.pillar_heights.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidConfig("pillar heights must be finite".into()));
        }
        let c = self.bev_channels;
        if c == 0 || c % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "bev_channels {c} must be a positive multiple of 4"
            )));
        }
        if self.num_heads == 0 || c % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "bev_channels {c} is not divisible by num_heads {}",
                self.num_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_bev_encoder(
    store: &mut ParamStore,
    init: &Initializer,
    cfg: &BevEncoderConfig,
    c_img: usize,
    grid: &BevGridSpec,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.bev_channels;
    init_linear(store, init, "bev.input_proj", c_img, c);
    store.insert(
        "bev.query",
        init.normal("bev.query", &[grid.num_cells(), c], 0.1),
    );
    for l in 1..=cfg.num_refine_layers {
        let p = format!("bev.refine_{l}");
        init_layer_norm(store, &format!("{p}.ln1"), c);
        init_attention(store, init, &format!("{p}.attn"), c);
        init_layer_norm(store, &format!("{p}.ln2"), c);
        init_mlp(store, init, &format!("{p}.mlp"), c, c * cfg.mlp_ratio, c);
    }
    Ok(())
}

/// Bilinear taps `(row-major index, weight)` at continuous feature-map
/// coordinates, clamped to the map; weights sum to 1.
pub fn bilinear_taps(fx: f64, fy: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let x = fx.clamp(0.0, (w - 1) as f64);
    let y = fy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    [
        (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * w + x1, tx * (1.0 - ty)),
        (y1 * w + x0, (1.0 - tx) * ty),
        (y1 * w + x1, tx * ty),
    ]
}

/// Sparse map from stacked camera features `[M·h·w, C]` to BEV cells
/// `[H·W, C]`: each cell averages the bilinear samples of all valid pillar
/// projections; cells without hits get an empty row.
pub fn sampling_map(
    rig: &[CameraParams],
    grid: &BevGridSpec,
    heights: &[f64],
    feat_dims: (usize, usize),
    patch: usize,
) -> SparseRows {
    let (fh, fw) = feat_dims;
    let per_cam = fh * fw;
    let mut map = SparseRows::new(rig.len() * per_cam);
    let mut entries = Vec::new();
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let p = grid.cell_center_unchecked(r, c);
            entries.clear();
            let mut hits = 0usize;
            for &z in heights {
                for (j, cam) in rig.iter().enumerate() {
                    let proj = cam.project([p[0], p[1], z]);
                    if !proj.valid {
                        continue;
                    }
                    hits += 1;
                    let fx = proj.pixel[0] / patch as f64 - 0.5;
                    let fy = proj.pixel[1] / patch as f64 - 0.5;
                    for (idx, w) in bilinear_taps(fx, fy, fh, fw) {
                        if w != 0.0 {
                            entries.push((j * per_cam + idx, w));
                        }
                    }
                }
            }
            let scale = if hits > 0 { 1.0 / hits as f64 } else { 0.0 };
            map.push_row(entries.iter().map(|&(i, w)| (i, w * scale)));
        }
    }
    map
}

/// Number of valid pillar projections per cell.
pub fn hit_counts(rig: &[CameraParams], grid: &BevGridSpec, heights: &[f64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(grid.num_cells());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let p = grid.cell_center_unchecked(r, c);
            out.push(
                heights
                    .iter()
                    .map(|&z| {
                        rig.iter()
                            .filter(|cam| cam.project([p[0], p[1], z]).valid)
                            .count()
                    })
                    .sum(),
            );
        }
    }
    out
}

/// Projected-and-sampled features plus queries, before refinement.
pub fn lift_features<'t>(b: &Bound<'t>, features: &[Var<'t>], sampler: &Rc<SparseRows>) -> Var<'t> {
    let projected: Vec<Var<'t>> = features
        .iter()
        .map(|f| linear(b, "bev.input_proj", *f))
        .collect();
    let stacked = Var::concat_rows(&projected);
    stacked.gather(sampler).add(b.get("bev.query"))
}

/// Self-attention refinement with fixed 2-D positions added to queries and keys.
pub fn refine<'t>(
    b: &Bound<'t>,
    cfg: &BevEncoderConfig,
    grid: &BevGridSpec,
    mut x: Var<'t>,
) -> Var<'t> {
    if cfg.num_refine_layers == 0 {
        return x;
    }
    let pos = b.constant(sinusoidal_2d(grid.rows, grid.cols, cfg.bev_channels));
    for l in 1..=cfg.num_refine_layers {
        let p = format!("bev.refine_{l}");
        let h = layer_norm(b, &format!("{p}.ln1"), x);
        let qk = h.add(pos);
        x = x.add(attention(b, &format!("{p}.attn"), qk, qk, h, cfg.num_heads));
        let h = layer_norm(b, &format!("{p}.ln2"), x);
        x = x.add(mlp(b, &format!("{p}.mlp"), h));
    }
    x
}

/// BEV features `[H·W, C]` in row-major cell order.
#[allow(clippy::too_many_arguments)]
pub fn encode_bev<'t>(
    b: &Bound<'t>,
    cfg: &BevEncoderConfig,
    grid: &BevGridSpec,
    rig: &[CameraParams],
    features: &[Var<'t>],
    feat_dims: (usize, usize),
    patch: usize,
) -> Result<Var<'t>> {
    if features.len() != rig.len() || features.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature maps for {} cameras",
            features.len(),
            rig.len()
        )));
    }
    for f in features {
        if f.shape()[0] != feat_dims.0 * feat_dims.1 {
            return Err(Error::ShapeMismatch(format!(
                "feature map with {} tokens, expected {}x{}",
                f.shape()[0],
                feat_dims.0,
                feat_dims.1
            )));
        }
    }
    let sampler = Rc::new(sampling_map(
        rig,
        grid,
        &cfg.pillar_heights,
        feat_dims,
        patch,
    ));
    let lifted = lift_features(b, features, &sampler);
    Ok(refine(b, cfg, grid, lifted))
}
