//! End-to-end wiring: backbone, BEV encoder, segmentation heads and decoder.

use std::collections::BTreeSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{SparseRows, Tape, Var};
use crate::backbone::{extract_features, init_backbone, trainable_parameters, BackboneConfig};
use crate::bev_encoder::{init_bev_encoder, lift_features, refine, sampling_map, BevEncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{arss_forward, aux_seg_forward, init_heads, HeadRole, SegInput};
use crate::map_core::{BevGridSpec, CameraParams, ScoredMap};
use crate::map_decoder::{
    decode_map, init_decoder, predictions_to_map, DecodedMap, DecoderConfig, DecoderOutput,
};
use crate::matching_losses::{total_loss, LossInputs, LossReport, LossWeights, SampleTargets};
use crate::nn::{Bound, Initializer, ParamStore, Trainable};
use crate::scene::RgbImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: BevGridSpec,
    /// `(height, width)` of every camera image.
    pub image_size: (usize, usize),
    pub backbone: BackboneConfig,
    pub bev: BevEncoderConfig,
    pub decoder: DecoderConfig,
    pub arss_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: BevGridSpec::desk(),
            image_size: (64, 128),
            backbone: BackboneConfig::default(),
            bev: BevEncoderConfig::default(),
            decoder: DecoderConfig::default(),
            arss_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.backbone.feature_dims(self.image_size)?;
        self.bev.validate()?;
        self.decoder.validate()?;
        if self.decoder.channels != self.bev.bev_channels {
            return Err(Error::InvalidConfig(format!(
                "decoder channels {} differ from BEV channels {}",
                self.decoder.channels, self.bev.bev_channels
            )));
        }
        Ok(())
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        let p = self.backbone.patch_size;
        (self.image_size.0 / p, self.image_size.1 / p)
    }
}

/// Everything one forward pass produces.
pub struct ModelOutputs<'t> {
    /// `[H·W, C]`.
    pub bev: Var<'t>,
    pub arss: Option<Var<'t>>,
    pub bev_lines: Var<'t>,
    /// One `[h·w, 1]` logit map per camera at image resolution.
    pub pv_lanes: Vec<Var<'t>>,
    pub decoder: DecoderOutput<'t>,
}

#[derive(Clone, Debug)]
pub struct MapFmModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl MapFmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Initializer::new(seed);
        let mut params = ParamStore::new();
        init_backbone(&mut params, &init, &config.backbone, config.image_size)?;
        let c_img = config.backbone.embed_dim;
        init_bev_encoder(&mut params, &init, &config.bev, c_img, &config.grid)?;
        init_heads(&mut params, &init, config.bev.bev_channels, c_img);
        init_decoder(&mut params, &init, &config.decoder)?;
        Ok(MapFmModel { config, params })
    }

    /// Parameters the optimizer may update: the backbone subset allowed by
    /// the freeze policy plus every non-backbone parameter, minus the ARSS
    /// head when it is disabled.
    pub fn trainable_set(&self) -> BTreeSet<String> {
        let mut set = trainable_parameters(&self.config.backbone, &self.params);
        let arss = HeadRole::Arss.prefix();
        for name in self.params.names() {
            if name.starts_with("backbone.") {
                continue;
            }
            if !self.config.arss_enabled && name.starts_with(arss) {
                continue;
            }
            set.insert(name.to_string());
        }
        set
    }

    /// Pillar sampling matrix for a rig; reusable across forward passes.
    pub fn sampler(&self, rig: &[CameraParams]) -> Rc<SparseRows> {
        let c = &self.config;
        Rc::new(sampling_map(
            rig,
            &c.grid,
            &c.bev.pillar_heights,
            c.feature_dims(),
            c.backbone.patch_size,
        ))
    }

    pub fn forward<'t>(
        &self,
        b: &Bound<'t>,
        images: &[RgbImage],
        sampler: &Rc<SparseRows>,
    ) -> Result<ModelOutputs<'t>> {
        let c = &self.config;
        for img in images {
            if (img.height(), img.width()) != c.image_size {
                return Err(Error::ShapeMismatch(format!(
                    "image {}x{}, model expects {}x{}",
                    img.height(),
                    img.width(),
                    c.image_size.0,
                    c.image_size.1
                )));
            }
        }
        let features = extract_features(b, &c.backbone, images)?;
        if sampler.in_rows() != features.len() * c.feature_dims().0 * c.feature_dims().1 {
            return Err(Error::ShapeMismatch(
                "sampler does not match the camera count".into(),
            ));
        }
        let bev = refine(b, &c.bev, &c.grid, lift_features(b, &features, sampler));
        let (rows, cols) = (c.grid.rows, c.grid.cols);
        let arss = c.arss_enabled.then(|| arss_forward(b, bev, rows, cols));
        let bev_lines =
            aux_seg_forward(b, SegInput::Bev { x: bev, rows, cols }, HeadRole::BevLines)?;
        let (fh, fw) = c.feature_dims();
        let pv_lanes = features
            .iter()
            .map(|&x| {
                aux_seg_forward(
                    b,
                    SegInput::Camera {
                        x,
                        rows: fh,
                        cols: fw,
                        image_size: c.image_size,
                    },
                    HeadRole::PvLanes,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = decode_map(b, &c.decoder, bev, &c.grid);
        Ok(ModelOutputs {
            bev,
            arss,
            bev_lines,
            pv_lanes,
            decoder,
        })
    }

    pub fn loss<'t>(
        &self,
        out: &ModelOutputs<'t>,
        targets: &SampleTargets,
        weights: &LossWeights,
    ) -> Result<(Var<'t>, LossReport)> {
        let inputs = LossInputs {
            decoder: &out.decoder,
            points_per_element: self.config.decoder.points_per_element,
            arss: out.arss,
            bev_lines: out.bev_lines,
            pv_lanes: &out.pv_lanes,
        };
        total_loss(&inputs, targets, &self.config.grid, weights)
    }

    /// Final-layer decoder predictions without gradient tracking.
    pub fn decode(&self, images: &[RgbImage], sampler: &Rc<SparseRows>) -> Result<DecodedMap> {
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.params, Trainable::Nothing);
        let out = self.forward(&b, images, sampler)?;
        Ok(DecodedMap::from_output(
            &out.decoder,
            self.config.decoder.points_per_element,
        ))
    }

    pub fn predict(
        &self,
        images: &[RgbImage],
        sampler: &Rc<SparseRows>,
        score_threshold: f64,
    ) -> Result<ScoredMap> {
        let decoded = self.decode(images, sampler)?;
        predictions_to_map(&decoded, &self.config.grid, score_threshold)
    }
}
