//! Hungarian set matching and every training loss term.

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tensor, Var};
use crate::error::{Error, Result};
use crate::map_core::{resample_element, BevGridSpec, MapClass, Point2};
use crate::map_decoder::DecoderOutput;
use crate::scene::SceneSample;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const DICE_EPS: f64 = 1e-6;
const NONFINITE_COST: f64 = 1e150;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub pts: f64,
    pub cls: f64,
    pub dir: f64,
    pub bevseg: f64,
    pub pvseg: f64,
    pub surf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pts: 5.0,
            cls: 2.0,
            dir: 0.005,
            bevseg: 1.0,
            pvseg: 1.0,
            surf: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.pts,
            self.cls,
            self.dir,
            self.bevseg,
            self.pvseg,
            self.surf,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_pts: f64,
    pub l_cls: f64,
    pub l_dir: f64,
    pub l_bevseg: f64,
    pub l_pvseg: f64,
    pub l_surf: f64,
    pub total: f64,
}

impl LossReport {
    /// Builds a report whose `total` is the weighted sum of the components.
    pub fn from_components(c: [f64; 6], w: &LossWeights) -> Self {
        let mut r = LossReport {
            l_pts: c[0],
            l_cls: c[1],
            l_dir: c[2],
            l_bevseg: c[3],
            l_pvseg: c[4],
            l_surf: c[5],
            total: 0.0,
        };
        r.total = r.weighted_total(w);
        r
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.pts * self.l_pts
            + w.cls * self.l_cls
            + w.dir * self.l_dir
            + w.bevseg * self.l_bevseg
            + w.pvseg * self.l_pvseg
            + w.surf * self.l_surf
    }

    pub fn components(&self) -> [f64; 6] {
        [
            self.l_pts,
            self.l_cls,
            self.l_dir,
            self.l_bevseg,
            self.l_pvseg,
            self.l_surf,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }

    /// Component-wise mean of several reports, total recomputed.
    pub fn mean(reports: &[LossReport], w: &LossWeights) -> Self {
        let mut acc = [0.0; 6];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.components()) {
                *a += v;
            }
        }
        let n = reports.len().max(1) as f64;
        Self::from_components(acc.map(|a| a / n), w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perm {
    Forward,
    Reverse,
}

fn mean_l1(a: &[Point2], b: impl Iterator<Item = Point2>) -> f64 {
    let mut s = 0.0;
    for (p, q) in a.iter().zip(b) {
        s += (p[0] - q[0]).abs() + (p[1] - q[1]).abs();
    }
    s / a.len() as f64
}

/// Minimum over forward/reverse order of the mean per-point L1 distance.
/// Ties resolve to forward.
pub fn point_cost(pred: &[Point2], gt: &[Point2]) -> Result<(f64, Perm)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "point_cost: {} predicted vs {} ground-truth points",
            pred.len(),
            gt.len()
        )));
    }
    let fwd = mean_l1(pred, gt.iter().copied());
    let rev = mean_l1(pred, gt.iter().rev().copied());
    Ok(if rev < fwd {
        (rev, Perm::Reverse)
    } else {
        (fwd, Perm::Forward)
    })
}

/// Minimum-cost assignment of `min(R, C)` pairs, returned sorted by row.
///
/// Shortest augmenting paths with potentials; rows are inserted in index
/// order and columns scanned in index order, so ties resolve deterministically.
/// Non-finite entries are treated as a very large finite cost.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    if rows == 0 || cost[0].is_empty() {
        return Vec::new();
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        let clean: Vec<Vec<f64>> = cost
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&c| {
                        if c.is_finite() {
                            c.clamp(-NONFINITE_COST, NONFINITE_COST)
                        } else {
                            NONFINITE_COST
                        }
                    })
                    .collect()
            })
            .collect();
        return hungarian(&clean);
    }
    let cols = cost[0].len();
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| cost[r][c]).collect())
            .collect();
        let mut pairs: Vec<(usize, usize)> =
            hungarian(&t).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    // 1-based potentials formulation; column 0 is a virtual source.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal matching cost of predicting `class` from per-class logits.
pub fn focal_cost(logits: &[f64], class: MapClass) -> f64 {
    let x = logits[class.index()];
    let p = sigmoid(x);
    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * softplus(-x);
    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * softplus(x);
    pos - neg
}

/// A ground-truth element resampled to the decoder's point count, in
/// normalized BEV coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub class: MapClass,
    pub points: Vec<Point2>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub cls: f64,
    pub pts: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights { cls: 2.0, pts: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(pred, gt, perm)` sorted by prediction index.
    pub pairs: Vec<(usize, usize, Perm)>,
    pub unmatched_preds: Vec<usize>,
    pub total_cost: f64,
}

/// Matching cost matrix `[N][k]` and the per-entry permutation choice.
pub fn cost_matrix(
    class_logits: &Tensor,
    points: &Tensor,
    n: usize,
    gts: &[GtInstance],
    w: &MatchWeights,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Perm>>)> {
    let num = class_logits.rows();
    let mut cost = vec![Vec::with_capacity(gts.len()); num];
    let mut perms = vec![Vec::with_capacity(gts.len()); num];
    for i in 0..num {
        let pred: Vec<Point2> = (0..n)
            .map(|j| {
                let r = points.row(i * n + j);
                [r[0], r[1]]
            })
            .collect();
        for g in gts {
            let (pc, perm) = point_cost(&pred, &g.points)?;
            cost[i].push(w.cls * focal_cost(class_logits.row(i), g.class) + w.pts * pc);
            perms[i].push(perm);
        }
    }
    Ok((cost, perms))
}

pub fn match_instances(
    class_logits: &Tensor,
    points: &Tensor,
    n: usize,
    gts: &[GtInstance],
    w: &MatchWeights,
) -> Result<MatchResult> {
    let num = class_logits.rows();
    if gts.is_empty() {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched_preds: (0..num).collect(),
            total_cost: 0.0,
        });
    }
    let (cost, perms) = cost_matrix(class_logits, points, n, gts, w)?;
    let assignment = hungarian(&cost);
    let mut matched = vec![false; num];
    let mut total_cost = 0.0;
    let pairs = assignment
        .into_iter()
        .map(|(i, g)| {
            matched[i] = true;
            total_cost += cost[i][g];
            (i, g, perms[i][g])
        })
        .collect();
    Ok(MatchResult {
        pairs,
        unmatched_preds: (0..num).filter(|&i| !matched[i]).collect(),
        total_cost,
    })
}

/// `1 − (2·Σ p·g + ε) / (Σp + Σg + ε)`.
pub fn dice_loss(prob: &[f64], gt: &[f64], eps: f64) -> Result<f64> {
    if prob.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "dice: {} vs {} cells",
            prob.len(),
            gt.len()
        )));
    }
    let inter: f64 = prob.iter().zip(gt).map(|(p, g)| p * g).sum();
    let sp: f64 = prob.iter().sum();
    let sg: f64 = gt.iter().sum();
    Ok(1.0 - (2.0 * inter + eps) / (sp + sg + eps))
}

/// Sigmoid focal loss of one logit against a binary target.
pub fn focal_term(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    if t >= 0.5 {
        alpha * (1.0 - p).powf(gamma) * softplus(-x)
    } else {
        (1.0 - alpha) * p.powf(gamma) * softplus(x)
    }
}

fn focal_term_grad(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    if t >= 0.5 {
        // log p = −softplus(−x)
        let q = 1.0 - p;
        alpha * q.powf(gamma) * (-gamma * p * softplus(-x) - q)
    } else {
        (1.0 - alpha) * p.powf(gamma) * (p + gamma * (1.0 - p) * softplus(x))
    }
}

/// Binary cross-entropy of a logit.
pub fn bce_term(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Mean over edges of `1 − cos` between predicted and ground-truth edge
/// vectors after scaling coordinates by `scale`; zero-length edges count 1.
pub fn direction_loss(pred: &[Point2], gt: &[Point2], scale: [f64; 2]) -> f64 {
    let edges = pred.len().saturating_sub(1).max(1);
    let mut s = 0.0;
    for j in 0..pred.len().saturating_sub(1) {
        s += 1.0 - edge_cos(pred, gt, j, scale).0;
    }
    s / edges as f64
}

/// Cosine between edge `j` of both chains plus the scaled vectors; zero if
/// either edge is degenerate.
fn edge_cos(
    pred: &[Point2],
    gt: &[Point2],
    j: usize,
    scale: [f64; 2],
) -> (f64, [f64; 2], [f64; 2]) {
    let e = [
        (pred[j + 1][0] - pred[j][0]) * scale[0],
        (pred[j + 1][1] - pred[j][1]) * scale[1],
    ];
    let g = [
        (gt[j + 1][0] - gt[j][0]) * scale[0],
        (gt[j + 1][1] - gt[j][1]) * scale[1],
    ];
    let (ne, ng) = (e[0].hypot(e[1]), g[0].hypot(g[1]));
    if ne == 0.0 || ng == 0.0 {
        return (0.0, e, g);
    }
    ((e[0] * g[0] + e[1] * g[1]) / (ne * ng), e, g)
}

// Differentiable loss ops. Targets are plain tensors captured by value.

/// Mean binary cross-entropy over every entry.
pub fn bce_mean<'t>(logits: Var<'t>, targets: &Tensor) -> Var<'t> {
    let x = logits.value();
    assert_eq!(x.shape(), targets.shape(), "bce: shape mismatch");
    let n = x.len() as f64;
    let loss: f64 = x
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| bce_term(x, t))
        .sum::<f64>()
        / n;
    let t = targets.clone();
    logits
        .tape()
        .custom(&[logits], Tensor::scalar(loss), move |g, _| {
            let s = g.item() / n;
            let d = x
                .data()
                .iter()
                .zip(t.data())
                .map(|(&x, &t)| s * (sigmoid(x) - t))
                .collect();
            vec![Some(Tensor::new(x.shape(), d))]
        })
}

/// Focal loss summed over all entries and divided by `norm`.
pub fn focal_sum<'t>(
    logits: Var<'t>,
    targets: &Tensor,
    alpha: f64,
    gamma: f64,
    norm: f64,
) -> Var<'t> {
    let x = logits.value();
    assert_eq!(x.shape(), targets.shape(), "focal: shape mismatch");
    let loss: f64 = x
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| focal_term(x, t, alpha, gamma))
        .sum::<f64>()
        / norm;
    let t = targets.clone();
    logits
        .tape()
        .custom(&[logits], Tensor::scalar(loss), move |g, _| {
            let s = g.item() / norm;
            let d = x
                .data()
                .iter()
                .zip(t.data())
                .map(|(&x, &t)| s * focal_term_grad(x, t, alpha, gamma))
                .collect();
            vec![Some(Tensor::new(x.shape(), d))]
        })
}

/// Sum over channels of the dice loss of `prob [P, K]` against `gt [P, K]`.
pub fn dice_sum<'t>(prob: Var<'t>, gt: &Tensor, eps: f64) -> Var<'t> {
    let p = prob.value();
    assert_eq!(p.shape(), gt.shape(), "dice: shape mismatch");
    let (rows, k) = (p.rows(), p.cols());
    let mut stats = Vec::with_capacity(k);
    let mut loss = 0.0;
    for c in 0..k {
        let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for r in 0..rows {
            let (pv, gv) = (p.data()[r * k + c], gt.data()[r * k + c]);
            inter += pv * gv;
            sp += pv;
            sg += gv;
        }
        let num = 2.0 * inter + eps;
        let den = sp + sg + eps;
        loss += 1.0 - num / den;
        stats.push((num, den));
    }
    let gt = gt.clone();
    prob.tape()
        .custom(&[prob], Tensor::scalar(loss), move |g, _| {
            let s = g.item();
            let mut d = vec![0.0; rows * k];
            for r in 0..rows {
                for (c, &(num, den)) in stats.iter().enumerate() {
                    let gv = gt.data()[r * k + c];
                    d[r * k + c] = s * -(2.0 * gv * den - num) / (den * den);
                }
            }
            vec![Some(Tensor::new(&[rows, k], d))]
        })
}

/// `Σ w·|x − t|` over every entry.
pub fn weighted_l1<'t>(x: Var<'t>, targets: &Tensor, weights: &Tensor) -> Var<'t> {
    let v = x.value();
    assert_eq!(v.shape(), targets.shape(), "l1: shape mismatch");
    let loss: f64 = v
        .data()
        .iter()
        .zip(targets.data())
        .zip(weights.data())
        .map(|((a, t), w)| w * (a - t).abs())
        .sum();
    let (t, w) = (targets.clone(), weights.clone());
    x.tape().custom(&[x], Tensor::scalar(loss), move |g, _| {
        let s = g.item();
        let d = v
            .data()
            .iter()
            .zip(t.data())
            .zip(w.data())
            .map(|((a, t), w)| {
                let diff = a - t;
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                s * w * sign
            })
            .collect();
        vec![Some(Tensor::new(v.shape(), d))]
    })
}

/// Mean over `pairs` of [`direction_loss`]. `points [N·n, 2]`; each pair is
/// `(pred index, gt chain already in matched order)`.
pub fn direction_mean<'t>(
    points: Var<'t>,
    n: usize,
    pairs: Vec<(usize, Vec<Point2>)>,
    scale: [f64; 2],
) -> Var<'t> {
    let v = points.value();
    let count = pairs.len().max(1) as f64;
    let edges = (n - 1) as f64;
    let pred_chain = |i: usize| -> Vec<Point2> {
        (0..n)
            .map(|j| {
                let r = v.row(i * n + j);
                [r[0], r[1]]
            })
            .collect()
    };
    let loss: f64 = pairs
        .iter()
        .map(|(i, gt)| direction_loss(&pred_chain(*i), gt, scale))
        .sum::<f64>()
        / count;
    let vv = v.clone();
    points
        .tape()
        .custom(&[points], Tensor::scalar(loss), move |g, _| {
            let s = g.item() / (count * edges);
            let mut d = vec![0.0; vv.len()];
            for (i, gt) in &pairs {
                let pred: Vec<Point2> = (0..n)
                    .map(|j| {
                        let r = vv.row(i * n + j);
                        [r[0], r[1]]
                    })
                    .collect();
                for j in 0..n - 1 {
                    let (cos, e, gv) = edge_cos(&pred, gt, j, scale);
                    let (ne, ng) = (e[0].hypot(e[1]), gv[0].hypot(gv[1]));
                    if ne == 0.0 || ng == 0.0 {
                        continue;
                    }
                    // d(1 − cos)/de, then chain through e = (p[j+1] − p[j])·scale.
                    for a in 0..2 {
                        let dcos = gv[a] / (ne * ng) - cos * e[a] / (ne * ne);
                        let de = -dcos * scale[a] * s;
                        d[(i * n + j + 1) * 2 + a] += de;
                        d[(i * n + j) * 2 + a] -= de;
                    }
                }
            }
            vec![Some(Tensor::new(vv.shape(), d))]
        })
}

/// Per-sample supervision in the layouts the heads and decoder produce.
#[derive(Clone, Debug)]
pub struct SampleTargets {
    pub instances: Vec<GtInstance>,
    /// `[H·W, 2]`: drivable, ped crossing.
    pub arss: Tensor,
    /// `[H·W, 3]` in class-index order.
    pub bev_lines: Tensor,
    /// One `[h·w, 1]` mask per camera.
    pub pv: Vec<Tensor>,
}

impl SampleTargets {
    pub fn from_sample(sample: &SceneSample, grid: &BevGridSpec, n: usize) -> Result<Self> {
        let instances = sample
            .gt_map
            .elements
            .iter()
            .map(|e| {
                let pts = resample_element(e, n)?;
                Ok(GtInstance {
                    class: e.class(),
                    points: pts.into_iter().map(|p| grid.normalize(p)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cells = grid.num_cells();
        let channels = |masks: &[&crate::map_core::BinaryMask]| -> Tensor {
            let k = masks.len();
            let mut d = vec![0.0; cells * k];
            for (c, m) in masks.iter().enumerate() {
                for (i, v) in m.to_f64().into_iter().enumerate() {
                    d[i * k + c] = v;
                }
            }
            Tensor::new(&[cells, k], d)
        };
        let arss = channels(&sample.gt_bev_masks.channels());
        let lines = channels(&sample.gt_line_masks.masks.iter().collect::<Vec<_>>());
        let pv = sample
            .gt_pv_masks
            .iter()
            .map(|m| Tensor::new(&[m.rows() * m.cols(), 1], m.to_f64()))
            .collect();
        Ok(SampleTargets {
            instances,
            arss,
            bev_lines: lines,
            pv,
        })
    }
}

/// Model outputs a loss is computed from.
pub struct LossInputs<'a, 't> {
    pub decoder: &'a DecoderOutput<'t>,
    pub points_per_element: usize,
    /// ARSS logits `[H·W, 2]`; `None` when the head is disabled.
    pub arss: Option<Var<'t>>,
    pub bev_lines: Var<'t>,
    pub pv_lanes: &'a [Var<'t>],
}

/// Weighted multi-task loss. Each decoder layer is matched on its own; the
/// set-prediction terms are averaged over layers.
pub fn total_loss<'t>(
    inputs: &LossInputs<'_, 't>,
    targets: &SampleTargets,
    grid: &BevGridSpec,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossReport)> {
    let n = inputs.points_per_element;
    let match_w = MatchWeights {
        cls: weights.cls,
        pts: weights.pts,
    };
    let scale = [grid.x_extent(), grid.y_extent()];
    let layers = &inputs.decoder.layers;
    let mut set_terms: Vec<[Var<'t>; 3]> = Vec::with_capacity(layers.len());
    for layer in layers {
        let logits = layer.class_logits.value();
        let points = layer.points.value();
        let m = match_instances(&logits, &points, n, &targets.instances, &match_w)?;
        let num = logits.rows();
        let mut cls_t = Tensor::zeros(&[num, 3]);
        let mut pt_t = Tensor::zeros(points.shape());
        let mut pt_w = Tensor::zeros(points.shape());
        let mut dir_pairs = Vec::with_capacity(m.pairs.len());
        let pair_norm = 1.0 / (m.pairs.len().max(1) as f64 * n as f64);
        for &(i, g, perm) in &m.pairs {
            let gt = &targets.instances[g];
            cls_t.data_mut()[i * 3 + gt.class.index()] = 1.0;
            let chain: Vec<Point2> = match perm {
                Perm::Forward => gt.points.clone(),
                Perm::Reverse => gt.points.iter().rev().copied().collect(),
            };
            for (j, p) in chain.iter().enumerate() {
                for a in 0..2 {
                    pt_t.data_mut()[(i * n + j) * 2 + a] = p[a];
                    pt_w.data_mut()[(i * n + j) * 2 + a] = pair_norm;
                }
            }
            dir_pairs.push((i, chain));
        }
        let l_cls = focal_sum(
            layer.class_logits,
            &cls_t,
            FOCAL_ALPHA,
            FOCAL_GAMMA,
            num as f64,
        );
        let l_pts = weighted_l1(layer.points, &pt_t, &pt_w);
        let l_dir = direction_mean(layer.points, n, dir_pairs, scale);
        set_terms.push([l_pts, l_cls, l_dir]);
    }
    let inv_layers = 1.0 / layers.len() as f64;
    let avg = |k: usize| -> Var<'t> {
        let mut acc = set_terms[0][k];
        for t in &set_terms[1..] {
            acc = acc.add(t[k]);
        }
        acc.scale(inv_layers)
    };
    let (l_pts, l_cls, l_dir) = (avg(0), avg(1), avg(2));
    let l_bevseg = bce_mean(inputs.bev_lines, &targets.bev_lines);
    if inputs.pv_lanes.len() != targets.pv.len() {
        return Err(Error::ShapeMismatch(
            "one PV mask per camera expected".into(),
        ));
    }
    let mut l_pvseg = bce_mean(inputs.pv_lanes[0], &targets.pv[0]);
    for (x, t) in inputs.pv_lanes.iter().zip(&targets.pv).skip(1) {
        l_pvseg = l_pvseg.add(bce_mean(*x, t));
    }
    let l_pvseg = l_pvseg.scale(1.0 / targets.pv.len() as f64);
    let l_surf = inputs
        .arss
        .map(|a| dice_sum(a.sigmoid(), &targets.arss, DICE_EPS));

    let parts = [
        (l_pts, weights.pts),
        (l_cls, weights.cls),
        (l_dir, weights.dir),
        (l_bevseg, weights.bevseg),
        (l_pvseg, weights.pvseg),
    ];
    let mut total = parts[0].0.scale(parts[0].1);
    for (v, w) in &parts[1..] {
        total = total.add(v.scale(*w));
    }
    if let Some(s) = l_surf {
        total = total.add(s.scale(weights.surf));
    }
    let item = |v: Var<'t>| v.value().item();
    let report = LossReport::from_components(
        [
            item(l_pts),
            item(l_cls),
            item(l_dir),
            item(l_bevseg),
            item(l_pvseg),
            l_surf.map(item).unwrap_or(0.0),
        ],
        weights,
    );
    Ok((total, report))
}
