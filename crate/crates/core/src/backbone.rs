//! Patch-transformer image encoder with per-block taps, tap aggregation and
//! freeze policies.

use std::collections::BTreeSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{
    attention, conv3x3, conv_shifts, init_attention, init_conv3x3, init_layer_norm, init_linear,
    init_mlp, layer_norm, linear, mlp,
};
use crate::nn::{Bound, Initializer, ParamStore};
use crate::scene::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    LastLayer,
    Concat,
    MultiLayerCnn,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [
        Aggregation::LastLayer,
        Aggregation::Concat,
        Aggregation::MultiLayerCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::LastLayer => "last_layer",
            Aggregation::Concat => "concat",
            Aggregation::MultiLayerCnn => "multi_layer_cnn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    Frozen,
    FinetuneLast,
    Full,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 3] = [
        FreezePolicy::Frozen,
        FreezePolicy::FinetuneLast,
        FreezePolicy::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::Frozen => "frozen",
            FreezePolicy::FinetuneLast => "finetune_last",
            FreezePolicy::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub aggregation: Aggregation,
    /// 1-based block indices whose outputs are tapped.
    pub tap_blocks: Vec<usize>,
    pub freeze_policy: FreezePolicy,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_size: 8,
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 2,
            aggregation: Aggregation::LastLayer,
            tap_blocks: vec![4],
            freeze_policy: FreezePolicy::Full,
        }
    }
}

impl BackboneConfig {
    /// Taps used by `aggregation`: the last block alone, or blocks 2..=B
    /// (the scaled-down counterpart of taps 4, 8, 12 out of 12).
    pub fn default_taps(num_blocks: usize, aggregation: Aggregation) -> Vec<usize> {
        match aggregation {
            Aggregation::LastLayer => vec![num_blocks],
            _ => {
                let first = if num_blocks >= 3 { num_blocks - 2 } else { 1 };
                (first..=num_blocks).collect()
            }
        }
    }

    pub fn with_aggregation(mut self, aggregation: Aggregation) -> Self {
        self.aggregation = aggregation;
        self.tap_blocks = Self::default_taps(self.num_blocks, aggregation);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0
            || self.embed_dim == 0
            || self.num_blocks == 0
            || self.mlp_ratio == 0
        {
            return bad("backbone sizes must be positive".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.tap_blocks.is_empty()
            || self
                .tap_blocks
                .iter()
                .any(|&t| t == 0 || t > self.num_blocks)
        {
            return bad(format!(
                "tap_blocks {:?} outside 1..={}",
                self.tap_blocks, self.num_blocks
            ));
        }
        if self.tap_blocks.windows(2).any(|w| w[0] >= w[1]) {
            return bad("tap_blocks must be strictly ascending".into());
        }
        if self.aggregation == Aggregation::LastLayer && self.tap_blocks != [self.num_blocks] {
            return bad("last_layer aggregation taps only the last block".into());
        }
        if self.aggregation == Aggregation::MultiLayerCnn && self.embed_dim % 4 != 0 {
            return bad("multi_layer_cnn needs embed_dim divisible by 4".into());
        }
        Ok(())
    }

    /// Feature-map size for an image, or an error when the patch does not tile it.
    pub fn feature_dims(&self, image_size: (usize, usize)) -> Result<(usize, usize)> {
        let (h, w) = image_size;
        let p = self.patch_size;
        if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!(
                "image {h}x{w} is not divisible by patch size {p}"
            )));
        }
        Ok((h / p, w / p))
    }

    /// Channels entering the aggregation step.
    pub fn pre_projection_channels(&self) -> usize {
        match self.aggregation {
            Aggregation::LastLayer => self.embed_dim,
            Aggregation::Concat => self.tap_blocks.len() * self.embed_dim,
            Aggregation::MultiLayerCnn => self.embed_dim,
        }
    }
}

fn block_prefix(i: usize) -> String {
    format!("backbone.block_{i}")
}

pub fn init_backbone(
    store: &mut ParamStore,
    init: &Initializer,
    cfg: &BackboneConfig,
    image_size: (usize, usize),
) -> Result<()> {
    cfg.validate()?;
    let (fh, fw) = cfg.feature_dims(image_size)?;
    let c = cfg.embed_dim;
    let patch_in = cfg.patch_size * cfg.patch_size * 3;
    init_linear(store, init, "backbone.patch_embed", patch_in, c);
    store.insert(
        "backbone.pos_embed",
        init.normal("backbone.pos_embed", &[fh * fw, c], 0.02),
    );
    for i in 1..=cfg.num_blocks {
        let p = block_prefix(i);
        init_layer_norm(store, &format!("{p}.ln1"), c);
        init_attention(store, init, &format!("{p}.attn"), c);
        init_layer_norm(store, &format!("{p}.ln2"), c);
        init_mlp(store, init, &format!("{p}.mlp"), c, c * cfg.mlp_ratio, c);
    }
    init_layer_norm(store, "backbone.final_norm", c);
    match cfg.aggregation {
        Aggregation::LastLayer => {}
        Aggregation::Concat => init_linear(store, init, "neck.proj", cfg.tap_blocks.len() * c, c),
        Aggregation::MultiLayerCnn => {
            for t in &cfg.tap_blocks {
                init_linear(store, init, &format!("neck.lateral_{t}"), c, c);
            }
            init_conv3x3(store, init, "neck.fuse", c, c);
        }
    }
    Ok(())
}

/// `[T, p·p·3]` patches in row-major patch order, channel-last within a patch.
pub fn patchify(image: &RgbImage, patch: usize) -> Tensor {
    let (gh, gw) = (image.height() / patch, image.width() / patch);
    let mut data = Vec::with_capacity(gh * gw * patch * patch * 3);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                for c in 0..patch {
                    let px = image.get(pr * patch + r, pc * patch + c);
                    data.extend(px.iter().map(|&v| v as f64 / 255.0));
                }
            }
        }
    }
    Tensor::new(&[gh * gw, patch * patch * 3], data)
}

/// Normalized outputs of every tapped block for one image, in tap order.
pub fn tap_features<'t>(b: &Bound<'t>, cfg: &BackboneConfig, patches: Var<'t>) -> Vec<Var<'t>> {
    let mut x = linear(b, "backbone.patch_embed", patches).add(b.get("backbone.pos_embed"));
    let mut taps = Vec::with_capacity(cfg.tap_blocks.len());
    for i in 1..=cfg.num_blocks {
        let p = block_prefix(i);
        let h = layer_norm(b, &format!("{p}.ln1"), x);
        x = x.add(attention(b, &format!("{p}.attn"), h, h, h, cfg.num_heads));
        let h = layer_norm(b, &format!("{p}.ln2"), x);
        x = x.add(mlp(b, &format!("{p}.mlp"), h));
        if cfg.tap_blocks.contains(&i) {
            taps.push(layer_norm(b, "backbone.final_norm", x));
        }
    }
    taps
}

/// Raw block outputs (before the final norm), for inspection.
pub fn block_outputs<'t>(b: &Bound<'t>, cfg: &BackboneConfig, patches: Var<'t>) -> Vec<Var<'t>> {
    let mut x = linear(b, "backbone.patch_embed", patches).add(b.get("backbone.pos_embed"));
    let mut out = Vec::with_capacity(cfg.num_blocks);
    for i in 1..=cfg.num_blocks {
        let p = block_prefix(i);
        let h = layer_norm(b, &format!("{p}.ln1"), x);
        x = x.add(attention(b, &format!("{p}.attn"), h, h, h, cfg.num_heads));
        let h = layer_norm(b, &format!("{p}.ln2"), x);
        x = x.add(mlp(b, &format!("{p}.mlp"), h));
        out.push(x);
    }
    out
}

fn aggregate<'t>(
    b: &Bound<'t>,
    cfg: &BackboneConfig,
    taps: Vec<Var<'t>>,
    shifts: &[Rc<crate::autograd::SparseRows>],
) -> Var<'t> {
    match cfg.aggregation {
        Aggregation::LastLayer => taps[0],
        Aggregation::Concat => linear(b, "neck.proj", Var::concat_cols(&taps)),
        Aggregation::MultiLayerCnn => {
            // Top-down: deepest lateral first, each shallower level adds the running sum.
            let mut acc: Option<Var<'t>> = None;
            for (t, x) in cfg.tap_blocks.iter().zip(&taps).rev() {
                let lat = linear(b, &format!("neck.lateral_{t}"), *x);
                acc = Some(match acc {
                    None => lat,
                    Some(a) => a.add(lat),
                });
            }
            conv3x3(b, "neck.fuse", acc.expect("at least one tap"), shifts)
        }
    }
}

/// Per-camera feature maps `[h·w, C_img]` (row-major patch order).
pub fn extract_features<'t>(
    b: &Bound<'t>,
    cfg: &BackboneConfig,
    images: &[RgbImage],
) -> Result<Vec<Var<'t>>> {
    let mut out = Vec::with_capacity(images.len());
    let mut shifts = None;
    for img in images {
        let (fh, fw) = cfg.feature_dims((img.height(), img.width()))?;
        let shifts = shifts.get_or_insert_with(|| conv_shifts(fh, fw));
        let patches = b.constant(patchify(img, cfg.patch_size));
        let taps = tap_features(b, cfg, patches);
        out.push(aggregate(b, cfg, taps, shifts));
    }
    Ok(out)
}

/// Backbone parameter names updated under the configured freeze policy.
/// Aggregation (`neck.*`) parameters are not part of the backbone.
pub fn trainable_parameters(cfg: &BackboneConfig, params: &ParamStore) -> BTreeSet<String> {
    let last = format!("{}.", block_prefix(cfg.num_blocks));
    params
        .with_prefix("backbone.")
        .filter(|name| match cfg.freeze_policy {
            FreezePolicy::Frozen => false,
            FreezePolicy::FinetuneLast => {
                name.starts_with(&last) || name.starts_with("backbone.final_norm.")
            }
            FreezePolicy::Full => true,
        })
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_difference, max_relative_error, Tape};
    use crate::nn::Trainable;

    fn store_for(cfg: &BackboneConfig, image: (usize, usize)) -> ParamStore {
        let mut s = ParamStore::new();
        init_backbone(&mut s, &Initializer::new(3), cfg, image).unwrap();
        s
    }

    fn noise_image(h: usize, w: usize, seed: u8) -> RgbImage {
        let mut img = RgbImage::new(h, w);
        for r in 0..h {
            for c in 0..w {
                let v = ((r * 31 + c * 17 + seed as usize * 7) % 251) as u8;
                img.set(r, c, [v, v.wrapping_mul(3), 255 - v]);
            }
        }
        img
    }

    #[test]
    fn feature_map_shape() {
        let cfg = BackboneConfig::default();
        let s = store_for(&cfg, (64, 128));
        let tape = Tape::new();
        let b = Bound::new(&tape, &s, Trainable::Nothing);
        let f = extract_features(&b, &cfg, &[noise_image(64, 128, 1)]).unwrap();
        assert_eq!(f[0].shape(), vec![8 * 16, 32]);
    }

    #[test]
    fn concat_pre_projection_width() {
        let cfg = BackboneConfig {
            num_blocks: 3,
            ..BackboneConfig::default()
        }
        .with_aggregation(Aggregation::Concat);
        assert_eq!(cfg.tap_blocks, vec![1, 2, 3]);
        assert_eq!(cfg.pre_projection_channels(), 96);
        let s = store_for(&cfg, (64, 128));
        assert_eq!(s.get("neck.proj.w").unwrap().shape(), &[96, 32]);
        for agg in Aggregation::ALL {
            let cfg = BackboneConfig::default().with_aggregation(agg);
            let s = store_for(&cfg, (64, 128));
            let tape = Tape::new();
            let b = Bound::new(&tape, &s, Trainable::Nothing);
            let f = extract_features(&b, &cfg, &[noise_image(64, 128, 2)]).unwrap();
            assert_eq!(f[0].shape(), vec![128, 32], "{agg:?}");
        }
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let cfg = BackboneConfig::default();
        assert!(cfg.feature_dims((60, 128)).is_err());
        let s = store_for(&cfg, (64, 128));
        let tape = Tape::new();
        let b = Bound::new(&tape, &s, Trainable::Nothing);
        assert!(extract_features(&b, &cfg, &[noise_image(60, 128, 0)]).is_err());
    }

    #[test]
    fn zero_path_gives_zero_blocks() {
        let cfg = BackboneConfig::default();
        let mut s = store_for(&cfg, (64, 128));
        let names: Vec<String> = s.names().map(str::to_string).collect();
        for n in names {
            if n.ends_with(".b") || n.ends_with(".bias") || n == "backbone.pos_embed" {
                s.get_mut(&n).unwrap().data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let b = Bound::new(&tape, &s, Trainable::Nothing);
        let patches = b.constant(patchify(&RgbImage::new(64, 128), 8));
        for out in block_outputs(&b, &cfg, patches) {
            assert!(out.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn trainable_sets_follow_policy() {
        let mut cfg = BackboneConfig::default();
        let s = store_for(&cfg, (64, 128));
        cfg.freeze_policy = FreezePolicy::Frozen;
        assert!(trainable_parameters(&cfg, &s).is_empty());
        cfg.freeze_policy = FreezePolicy::FinetuneLast;
        let set = trainable_parameters(&cfg, &s);
        assert!(!set.is_empty());
        assert!(set
            .iter()
            .all(|n| n.starts_with("backbone.block_4.") || n.starts_with("backbone.final_norm.")));
        assert!(set.contains("backbone.final_norm.gain"));
        cfg.freeze_policy = FreezePolicy::Full;
        let all = trainable_parameters(&cfg, &s);
        let audit = s.names().filter(|n| n.starts_with("backbone.")).count();
        assert_eq!(all.len(), audit);
        // 2 embed + pos + 4 blocks x (2 ln x 2 + 4 attn x 2 + 2 mlp x 2) + 2 final norm.
        assert_eq!(audit, 3 + 4 * 16 + 2);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = BackboneConfig::default().with_aggregation(Aggregation::MultiLayerCnn);
        let s = store_for(&cfg, (32, 64));
        let run = || {
            let tape = Tape::new();
            let b = Bound::new(&tape, &s, Trainable::Nothing);
            let out = extract_features(&b, &cfg, &[noise_image(32, 64, 4)]).unwrap();
            out[0].value().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn probe_gradient_matches_finite_differences() {
        for agg in Aggregation::ALL {
            let cfg = BackboneConfig {
                patch_size: 4,
                embed_dim: 8,
                num_blocks: 1,
                num_heads: 2,
                ..BackboneConfig::default()
            }
            .with_aggregation(agg);
            let image = noise_image(8, 16, 5);
            let store = store_for(&cfg, (8, 16));
            let probe = |s: &ParamStore| -> f64 {
                let tape = Tape::new();
                let b = Bound::new(&tape, s, Trainable::Nothing);
                let f = extract_features(&b, &cfg, std::slice::from_ref(&image)).unwrap();
                // A weighted sum avoids the layer-norm null direction of a plain sum.
                let v = f[0].value();
                v.data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * ((i % 7) as f64 - 3.0))
                    .sum()
            };
            let tape = Tape::new();
            let b = Bound::new(&tape, &store, Trainable::All);
            let f = extract_features(&b, &cfg, std::slice::from_ref(&image)).unwrap();
            let shape = f[0].shape();
            let weights: Vec<f64> = (0..shape[0] * shape[1])
                .map(|i| (i % 7) as f64 - 3.0)
                .collect();
            let loss = f[0].mul(b.constant(Tensor::new(&shape, weights))).sum();
            let mut g = tape.backward(loss);
            let grads = b.gradients(&mut g);
            for (name, analytic) in &grads {
                let base = store.get(name).unwrap().clone();
                let numeric = finite_difference(&base, 1e-4, |t| {
                    let mut s = store.clone();
                    *s.get_mut(name).unwrap() = t.clone();
                    probe(&s)
                });
                let err = max_relative_error(analytic, &numeric, 1e-6);
                assert!(err < 1e-4, "{agg:?} {name}: {err}");
            }
        }
    }
}
