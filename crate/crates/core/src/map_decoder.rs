//! Set-prediction map decoder: instance queries are scattered into point
//! queries, decoded against the BEV tokens and gathered back per instance.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, SparseRows, Tensor, Var};
use crate::error::{Error, Result};
use crate::map_core::{BevGridSpec, MapClass, MapElement, Point2, ScoredMap};
use crate::nn::layers::{
    attention, group_mean, init_attention, init_layer_norm, init_linear, init_mlp, layer_norm,
    linear, mlp, sinusoidal_2d,
};
use crate::nn::{Bound, Initializer, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_instances: usize,
    pub points_per_element: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_instances: 20,
            points_per_element: 8,
            num_layers: 2,
            num_heads: 4,
            channels: 32,
            mlp_ratio: 2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_instances == 0 || self.points_per_element < 2 || self.num_layers == 0 {
            return Err(Error::InvalidConfig(
                "decoder needs N >= 1, n >= 2 and at least one layer".into(),
            ));
        }
        if self.num_heads == 0 || self.channels % self.num_heads != 0 || self.channels % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "decoder channels {} must be a multiple of 4 and of num_heads {}",
                self.channels, self.num_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_decoder(store: &mut ParamStore, init: &Initializer, cfg: &DecoderConfig) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    store.insert(
        "decoder.instance_embed",
        init.normal("decoder.instance_embed", &[cfg.num_instances, c], 1.0),
    );
    store.insert(
        "decoder.point_pos",
        init.normal("decoder.point_pos", &[cfg.points_per_element, c], 1.0),
    );
    for l in 1..=cfg.num_layers {
        let p = format!("decoder.layer_{l}");
        init_layer_norm(store, &format!("{p}.ln1"), c);
        init_attention(store, init, &format!("{p}.self_attn"), c);
        init_layer_norm(store, &format!("{p}.ln2"), c);
        init_attention(store, init, &format!("{p}.cross_attn"), c);
        init_layer_norm(store, &format!("{p}.ln3"), c);
        init_mlp(store, init, &format!("{p}.mlp"), c, c * cfg.mlp_ratio, c);
    }
    init_mlp(store, init, "decoder.point_head", c, c, 2);
    init_linear(store, init, "decoder.class_head", c, MapClass::ALL.len());
    Ok(())
}

/// Outputs of one decoder layer.
#[derive(Clone, Copy)]
pub struct LayerOutput<'t> {
    /// `[N, 3]`.
    pub class_logits: Var<'t>,
    /// `[N·n, 2]` normalized `(u, v)`, row `i·n + j` is point `j` of instance `i`.
    pub points: Var<'t>,
    /// `[N, C]` mean of each instance's point queries.
    pub gathered: Var<'t>,
}

pub struct DecoderOutput<'t> {
    pub layers: Vec<LayerOutput<'t>>,
}

impl<'t> DecoderOutput<'t> {
    pub fn last(&self) -> &LayerOutput<'t> {
        self.layers.last().expect("decoder has at least one layer")
    }
}

/// Detached final-layer predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedMap {
    pub class_logits: Tensor,
    pub points: Tensor,
    pub points_per_element: usize,
}

impl DecodedMap {
    pub fn from_output(out: &DecoderOutput<'_>, points_per_element: usize) -> Self {
        let last = out.last();
        DecodedMap {
            class_logits: (*last.class_logits.value()).clone(),
            points: (*last.points.value()).clone(),
            points_per_element,
        }
    }

    pub fn num_instances(&self) -> usize {
        self.class_logits.rows()
    }

    /// Normalized points of instance `i`.
    pub fn instance_points(&self, i: usize) -> Vec<Point2> {
        let n = self.points_per_element;
        (0..n)
            .map(|j| {
                let r = self.points.row(i * n + j);
                [r[0], r[1]]
            })
            .collect()
    }
}

fn scatter_maps(num_instances: usize, n: usize) -> (Rc<SparseRows>, Rc<SparseRows>) {
    let mut inst = SparseRows::new(num_instances);
    let mut pos = SparseRows::new(n);
    for i in 0..num_instances {
        for j in 0..n {
            inst.push_row([(i, 1.0)]);
            pos.push_row([(j, 1.0)]);
        }
    }
    (Rc::new(inst), Rc::new(pos))
}

/// Runs every decoder layer against BEV tokens `[H·W, C]`.
pub fn decode_map<'t>(
    b: &Bound<'t>,
    cfg: &DecoderConfig,
    bev: Var<'t>,
    grid: &BevGridSpec,
) -> DecoderOutput<'t> {
    let (nq, n) = (cfg.num_instances, cfg.points_per_element);
    let (inst_map, pos_map) = scatter_maps(nq, n);
    let gather = Rc::new(group_mean(nq, n));
    let mut x = b
        .get("decoder.instance_embed")
        .gather(&inst_map)
        .add(b.get("decoder.point_pos").gather(&pos_map));
    let keys = bev.add(b.constant(sinusoidal_2d(grid.rows, grid.cols, cfg.channels)));
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 1..=cfg.num_layers {
        let p = format!("decoder.layer_{l}");
        let h = layer_norm(b, &format!("{p}.ln1"), x);
        x = x.add(attention(
            b,
            &format!("{p}.self_attn"),
            h,
            h,
            h,
            cfg.num_heads,
        ));
        let h = layer_norm(b, &format!("{p}.ln2"), x);
        x = x.add(attention(
            b,
            &format!("{p}.cross_attn"),
            h,
            keys,
            bev,
            cfg.num_heads,
        ));
        let h = layer_norm(b, &format!("{p}.ln3"), x);
        x = x.add(mlp(b, &format!("{p}.mlp"), h));

        let points = mlp(b, "decoder.point_head", x).sigmoid();
        let gathered = x.gather(&gather);
        let class_logits = linear(b, "decoder.class_head", gathered);
        layers.push(LayerOutput {
            class_logits,
            points,
            gathered,
        });
    }
    DecoderOutput { layers }
}

/// Converts final-layer predictions to a scored metric map. Crossings are
/// emitted as closed loops.
pub fn predictions_to_map(
    out: &DecodedMap,
    grid: &BevGridSpec,
    score_threshold: f64,
) -> Result<ScoredMap> {
    let mut scored = Vec::new();
    for i in 0..out.num_instances() {
        let logits = out.class_logits.row(i);
        let (best, logit) =
            logits
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
                );
        let confidence = sigmoid(logit);
        if confidence < score_threshold {
            continue;
        }
        let class = MapClass::from_index(best).expect("three classes");
        let mut pts: Vec<Point2> = Vec::with_capacity(out.points_per_element);
        for uv in out.instance_points(i) {
            let p = grid.denormalize(uv);
            match pts.last() {
                Some(q) if (q[0] - p[0]).hypot(q[1] - p[1]) <= 1e-9 => {}
                _ => pts.push(p),
            }
        }
        if pts.len() < 2 {
            // Fully collapsed prediction: keep it as a minimal segment.
            let p = pts[0];
            pts.push([p[0] + 1e-6, p[1]]);
        }
        let closed = class == MapClass::PedCrossing && pts.len() >= 3;
        scored.push((MapElement::new(class, pts, closed)?, confidence));
    }
    ScoredMap::new(scored)
}
