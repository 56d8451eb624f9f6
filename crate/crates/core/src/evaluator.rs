//! Chamfer-distance average precision over the three map classes.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map_core::{chamfer_points, resample_element, MapClass, Point2, ScoredMap, VectorMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub n_interp: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.5, 1.0, 1.5],
            n_interp: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one threshold is required".into(),
            ));
        }
        if self.thresholds.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(Error::InvalidConfig("thresholds must be positive".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "thresholds must be strictly ascending".into(),
            ));
        }
        if self.n_interp < 2 {
            return Err(Error::InvalidConfig("n_interp must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: MapClass,
    /// One value per threshold.
    pub ap: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassAp>,
    pub map: f64,
}

impl ApReport {
    /// Aggregates a `[class][threshold]` table in class-index order.
    pub fn from_table(thresholds: Vec<f64>, table: [Vec<f64>; 3]) -> Self {
        let classes: Vec<ClassAp> = MapClass::ALL
            .into_iter()
            .zip(table)
            .map(|(class, ap)| {
                let mean = ap.iter().sum::<f64>() / ap.len() as f64;
                ClassAp { class, ap, mean }
            })
            .collect();
        let map = classes.iter().map(|c| c.mean).sum::<f64>() / classes.len() as f64;
        ApReport {
            thresholds,
            classes,
            map,
        }
    }

    pub fn class_ap(&self, class: MapClass) -> f64 {
        self.classes[class.index()].mean
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fixed-width table with columns `AP_div AP_ped AP_bound mAP`.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>10} {:>8} {:>8} {:>8} {:>8}",
            "threshold", "AP_div", "AP_ped", "AP_bound", "mAP"
        );
        for (t, tau) in self.thresholds.iter().enumerate() {
            let row: Vec<f64> = self.classes.iter().map(|c| c.ap[t]).collect();
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let _ = writeln!(
                s,
                "{:>10} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                format!("{tau}m"),
                row[0],
                row[1],
                row[2],
                mean
            );
        }
        let _ = writeln!(
            s,
            "{:>10} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            "mean", self.classes[0].mean, self.classes[1].mean, self.classes[2].mean, self.map
        );
        s
    }
}

/// Chamfer distances between the class-`c` predictions and GTs of one sample.
struct SampleDistances {
    /// Confidence of each prediction, in the sample's element order.
    scores: Vec<f64>,
    /// `[pred][gt]`.
    cd: Vec<Vec<f64>>,
    num_gt: usize,
}

fn resampled(
    elements: impl Iterator<Item = crate::map_core::MapElement>,
    n: usize,
) -> Result<Vec<Vec<Point2>>> {
    elements.map(|e| resample_element(&e, n)).collect()
}

fn sample_distances(
    pred: &ScoredMap,
    gt: &VectorMap,
    class: MapClass,
    n_interp: usize,
) -> Result<SampleDistances> {
    let preds: Vec<_> = pred
        .elements()
        .iter()
        .filter(|(e, _)| e.class() == class)
        .collect();
    let p_pts = resampled(preds.iter().map(|(e, _)| e.clone()), n_interp)?;
    let g_pts = resampled(gt.of_class(class).cloned(), n_interp)?;
    let cd = p_pts
        .iter()
        .map(|p| g_pts.iter().map(|g| chamfer_points(p, g)).collect())
        .collect();
    Ok(SampleDistances {
        scores: preds.iter().map(|(_, s)| *s).collect(),
        cd,
        num_gt: g_pts.len(),
    })
}

/// Pooled, ranked greedy matching followed by all-point interpolated AP.
fn ap_from_distances(samples: &[SampleDistances], tau: f64) -> f64 {
    let total_gt: usize = samples.iter().map(|s| s.num_gt).sum();
    // (score, sample, element); sorted by score descending, then indices.
    let mut ranked: Vec<(f64, usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.scores
                .iter()
                .enumerate()
                .map(move |(ei, &sc)| (sc, si, ei))
        })
        .collect();
    if total_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut consumed: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.num_gt]).collect();
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, si, ei) in &ranked {
        // Closest unconsumed GT below the threshold; ties go to the lower index.
        let mut best: Option<(f64, usize)> = None;
        for (g, &d) in samples[si].cd[ei].iter().enumerate() {
            if !consumed[si][g] && d < tau && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, g));
            }
        }
        match best {
            Some((_, g)) => {
                consumed[si][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

fn class_distances(
    preds: &[ScoredMap],
    gts: &[VectorMap],
    class: MapClass,
    n_interp: usize,
) -> Result<Vec<SampleDistances>> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction maps vs {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| sample_distances(p, g, class, n_interp))
        .collect()
}

/// Average precision of one class at Chamfer threshold `tau` (meters).
///
/// Predictions are pooled across samples and ranked by confidence (ties: lower
/// sample index, then lower element index). Each one is a true positive if an
/// unconsumed same-sample GT of the class lies strictly closer than `tau`; the
/// closest such GT is consumed. With no GTs, AP is 1 without predictions and 0
/// otherwise.
pub fn ap_at_threshold(
    preds: &[ScoredMap],
    gts: &[VectorMap],
    class: MapClass,
    tau: f64,
    n_interp: usize,
) -> Result<f64> {
    let samples = class_distances(preds, gts, class, n_interp)?;
    Ok(ap_from_distances(&samples, tau))
}

pub fn evaluate(preds: &[ScoredMap], gts: &[VectorMap], cfg: &EvalConfig) -> Result<ApReport> {
    cfg.validate()?;
    let mut table: [Vec<f64>; 3] = Default::default();
    for class in MapClass::ALL {
        let samples = class_distances(preds, gts, class, cfg.n_interp)?;
        table[class.index()] = cfg
            .thresholds
            .iter()
            .map(|&t| ap_from_distances(&samples, t))
            .collect();
    }
    Ok(ApReport::from_table(cfg.thresholds.clone(), table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_core::MapElement;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(class: MapClass, y: f64) -> MapElement {
        MapElement::new(class, vec![[-5.0, y], [5.0, y]], false).unwrap()
    }

    #[test]
    fn identical_prediction_scores_one() {
        let gt = VectorMap::new(vec![line(MapClass::Divider, 0.0)]);
        let pred = ScoredMap::from_map(&gt);
        for tau in [0.01, 0.5, 1.5] {
            let ap = ap_at_threshold(&[pred.clone()], &[gt.clone()], MapClass::Divider, tau, 100)
                .unwrap();
            assert_eq!(ap, 1.0);
        }
    }

    #[test]
    fn empty_cases() {
        let gt = VectorMap::new(vec![line(MapClass::Divider, 0.0)]);
        let none = ScoredMap::new(vec![]).unwrap();
        assert_eq!(
            ap_at_threshold(&[none.clone()], &[gt.clone()], MapClass::Divider, 1.0, 50).unwrap(),
            0.0
        );
        assert_eq!(
            ap_at_threshold(&[none.clone()], &[gt.clone()], MapClass::Boundary, 1.0, 50).unwrap(),
            1.0
        );
        let pred = ScoredMap::from_map(&gt);
        assert_eq!(
            ap_at_threshold(
                &[pred],
                &[VectorMap::new(vec![])],
                MapClass::Divider,
                1.0,
                50
            )
            .unwrap(),
            0.0
        );
        assert!(ap_at_threshold(&[none], &[], MapClass::Divider, 1.0, 50).is_err());
    }

    #[test]
    fn shifted_prediction_respects_threshold() {
        let gt = VectorMap::new(vec![line(MapClass::Boundary, 0.0)]);
        let pred = ScoredMap::new(vec![(line(MapClass::Boundary, 0.8), 0.9)]).unwrap();
        let ap = |tau| {
            ap_at_threshold(&[pred.clone()], &[gt.clone()], MapClass::Boundary, tau, 100).unwrap()
        };
        assert_eq!(ap(0.5), 0.0);
        assert_eq!(ap(1.0), 1.0);
    }

    #[test]
    fn known_pr_curve() {
        // Ranked: TP, FP, TP against 2 GTs: precision 1, 1/2, 2/3 at recall
        // 1/2, 1/2, 1; envelope gives 1/2·1 + 1/2·2/3.
        let gt = VectorMap::new(vec![
            line(MapClass::Divider, 0.0),
            line(MapClass::Divider, 10.0),
        ]);
        let pred = ScoredMap::new(vec![
            (line(MapClass::Divider, 0.0), 0.9),
            (line(MapClass::Divider, -10.0), 0.8),
            (line(MapClass::Divider, 10.0), 0.7),
        ])
        .unwrap();
        let ap = ap_at_threshold(&[pred], &[gt], MapClass::Divider, 1.0, 50).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn table_row_arithmetic() {
        let t = vec![0.5, 1.0, 1.5];
        let r = ApReport::from_table(t, [vec![0.688; 3], vec![0.657; 3], vec![0.689; 3]]);
        assert!((r.map * 100.0 - 67.8).abs() < 0.05);
        let r = ApReport::from_table(vec![1.0], [vec![0.680], vec![0.634], vec![0.673]]);
        assert_eq!(format!("{:.1}", r.map * 100.0), "66.2");
        assert!((r.map * 100.0 - 66.3).abs() < 0.1);
    }

    #[test]
    fn perfect_predictions_give_unit_map() {
        let gt = VectorMap::new(vec![
            line(MapClass::Divider, 0.0),
            line(MapClass::Boundary, 5.0),
            MapElement::new(
                MapClass::PedCrossing,
                vec![[0.0, 0.0], [2.0, 0.0], [2.0, 4.0], [0.0, 4.0]],
                true,
            )
            .unwrap(),
        ]);
        let pred = ScoredMap::from_map(&gt);
        let r = evaluate(
            &[pred.clone(), pred],
            &[gt.clone(), gt],
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.to_table().contains("1.000"));
        assert_eq!(ApReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        for t in [vec![], vec![1.0, 0.5], vec![-1.0], vec![1.0, 1.0]] {
            assert!(EvalConfig {
                thresholds: t,
                n_interp: 10
            }
            .validate()
            .is_err());
        }
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Vec<ScoredMap>, Vec<VectorMap>) {
        let samples = rng.random_range(1..=3);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..samples {
            let g: Vec<MapElement> = (0..rng.random_range(0..=4))
                .map(|_| line(MapClass::Divider, rng.random_range(-3.0..3.0)))
                .collect();
            let p: Vec<(MapElement, f64)> = (0..rng.random_range(0..=5))
                .map(|_| {
                    let score = (rng.random_range(0..4) as f64) / 4.0;
                    (line(MapClass::Divider, rng.random_range(-3.0..3.0)), score)
                })
                .collect();
            preds.push(ScoredMap::new(p).unwrap());
            gts.push(VectorMap::new(g));
        }
        (preds, gts)
    }

    #[test]
    fn score_rescaling_and_threshold_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (preds, gts) = random_case(&mut rng);
            let rescaled: Vec<ScoredMap> = preds
                .iter()
                .map(|m| {
                    ScoredMap::new(
                        m.elements()
                            .iter()
                            .map(|(e, s)| (e.clone(), 0.1 + s * s * 3.0))
                            .collect(),
                    )
                    .unwrap()
                })
                .collect();
            let mut prev = 0.0;
            for tau in [0.2, 0.5, 1.0, 1.5, 3.0] {
                let a = ap_at_threshold(&preds, &gts, MapClass::Divider, tau, 20).unwrap();
                let b = ap_at_threshold(&rescaled, &gts, MapClass::Divider, tau, 20).unwrap();
                assert_eq!(a, b);
                assert!(a >= prev - 1e-12);
                assert!((0.0..=1.0).contains(&a));
                prev = a;
            }
        }
    }
}
