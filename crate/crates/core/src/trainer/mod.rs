//! Deterministic training loop, Adam, metrics logging, checkpoints and the
//! ablation harness.

mod ablation;
mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{
    run_ablation, AblationConfig, AblationRow, AblationSummary, AblationTable, AblationVariant,
};
pub use checkpoint::{Checkpoint, CheckpointMetrics, CHECKPOINT_FORMAT_VERSION};

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, ApReport, EvalConfig};
use crate::map_core::{ScoredMap, VectorMap};
use crate::matching_losses::{LossReport, LossWeights, SampleTargets};
use crate::model::{MapFmModel, ModelConfig};
use crate::nn::{Bound, ParamStore, Trainable};
use crate::scene::{Dataset, SceneSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate and checkpoint every this many steps; 0 disables periodic saves.
    pub eval_every: usize,
    /// Fraction of scenes (taken from the end) held out for evaluation.
    pub holdout_fraction: f64,
    /// Confidence below which predictions are dropped before evaluation.
    pub score_threshold: f64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 4e-4,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            eval_every: 500,
            holdout_fraction: 0.25,
            score_threshold: 0.0,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "steps and batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidConfig(
                "holdout_fraction must lie in [0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::InvalidConfig(
                "score_threshold must lie in [0, 1]".into(),
            ));
        }
        self.model.validate()?;
        self.weights.validate()?;
        self.eval.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Indices of the training and held-out scenes.
    pub fn split(&self, num_scenes: usize) -> (Vec<usize>, Vec<usize>) {
        let held = ((num_scenes as f64) * self.holdout_fraction).floor() as usize;
        let held = held.min(num_scenes.saturating_sub(1));
        let cut = num_scenes - held;
        ((0..cut).collect(), (cut..num_scenes).collect())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(params: &ParamStore, trainable: &BTreeSet<String>) -> Self {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for name in trainable {
            let shape = params
                .get(name)
                .expect("trainable parameter exists")
                .shape()
                .to_vec();
            m.insert(name.clone(), Tensor::zeros(&shape));
            v.insert(name.clone(), Tensor::zeros(&shape));
        }
        AdamState { t: 0, m, v }
    }

    /// One bias-corrected Adam update. Only names present in `grads` and in
    /// the moment stores are touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in grads {
            let (Some(m), Some(v)) = (self.m.get_mut(name), self.v.get_mut(name)) else {
                continue;
            };
            let p = params
                .get_mut(name)
                .expect("gradient for a registered parameter");
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// `holdout` or `train` when nothing is held out.
    pub split: String,
    pub report: ApReport,
}

/// Paths and results of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub eval_path: PathBuf,
    pub final_eval: EvalRecord,
}

/// Gradients of the batch-mean loss and the mean report.
pub fn batch_gradients(
    model: &MapFmModel,
    trainable: &BTreeSet<String>,
    samples: &[&SceneSample],
    targets: &[&SampleTargets],
    weights: &LossWeights,
) -> Result<(BTreeMap<String, Tensor>, LossReport)> {
    let scale = 1.0 / samples.len() as f64;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut reports = Vec::with_capacity(samples.len());
    for (sample, target) in samples.iter().zip(targets) {
        let tape = Tape::new();
        let b = Bound::new(&tape, &model.params, Trainable::Only(trainable));
        let sampler = model.sampler(&sample.rig);
        let out = model.forward(&b, &sample.images, &sampler)?;
        let (loss, report) = model.loss(&out, target, weights)?;
        reports.push(report);
        if !report.is_finite() {
            break;
        }
        let mut grads = tape.backward(loss);
        for (name, g) in b.gradients(&mut grads) {
            match acc.get_mut(&name) {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += scale * y;
                    }
                }
                None => {
                    let data = g.data().iter().map(|y| scale * y).collect();
                    acc.insert(name, Tensor::new(g.shape(), data));
                }
            }
        }
    }
    Ok((acc, LossReport::mean(&reports, weights)))
}

/// Runs the model on every sample and keeps predictions scoring at least
/// `score_threshold`.
pub fn predict_samples(
    model: &MapFmModel,
    samples: &[&SceneSample],
    score_threshold: f64,
) -> Result<Vec<ScoredMap>> {
    samples
        .par_iter()
        .map(|s| model.predict(&s.images, &model.sampler(&s.rig), score_threshold))
        .collect()
}

pub fn evaluate_model(
    model: &MapFmModel,
    samples: &[&SceneSample],
    cfg: &EvalConfig,
    score_threshold: f64,
) -> Result<(Vec<ScoredMap>, ApReport)> {
    let preds = predict_samples(model, samples, score_threshold)?;
    let gts: Vec<VectorMap> = samples.iter().map(|s| s.gt_map.clone()).collect();
    let report = evaluate(&preds, &gts, cfg)?;
    Ok((preds, report))
}

fn check_compatible(cfg: &ModelConfig, dataset: &Dataset) -> Result<()> {
    let data_grid = &dataset.manifest.config.scene.grid;
    if *data_grid != cfg.grid {
        return Err(Error::InvalidConfig(
            "model grid differs from the dataset grid".into(),
        ));
    }
    for s in &dataset.samples {
        for img in &s.images {
            if (img.height(), img.width()) != cfg.image_size {
                return Err(Error::InvalidConfig(format!(
                    "dataset images are {}x{}, model expects {}x{}",
                    img.height(),
                    img.width(),
                    cfg.image_size.0,
                    cfg.image_size.1
                )));
            }
        }
    }
    Ok(())
}

fn param_norms(params: &ParamStore) -> BTreeMap<String, f64> {
    params
        .iter()
        .map(|(n, t)| {
            (
                n.to_string(),
                t.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
            )
        })
        .collect()
}

/// Trains on `dataset`, writing `metrics.jsonl`, `eval.jsonl`,
/// `config.toml`, periodic `checkpoint_<step>.ckpt` files and `final.ckpt`
/// into `out_dir`. `on_step` observes every logged step.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(&cfg.model, dataset)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;

    let mut model = MapFmModel::new(cfg.model.clone(), cfg.seed)?;
    let trainable = model.trainable_set();
    let mut adam = AdamState::new(&model.params, &trainable);
    let n = cfg.model.decoder.points_per_element;
    let targets: Vec<SampleTargets> = dataset
        .samples
        .iter()
        .map(|s| SampleTargets::from_sample(s, &cfg.model.grid, n))
        .collect::<Result<_>>()?;
    let (train_idx, hold_idx) = cfg.split(dataset.samples.len());
    let (eval_idx, eval_split) = if hold_idx.is_empty() {
        (train_idx.clone(), "train")
    } else {
        (hold_idx.clone(), "holdout")
    };
    let eval_samples: Vec<&SceneSample> = eval_idx.iter().map(|&i| &dataset.samples[i]).collect();

    let metrics_path = out_dir.join("metrics.jsonl");
    let eval_path = out_dir.join("eval.jsonl");
    let mut metrics =
        BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);
    let mut evals = BufWriter::new(File::create(&eval_path).map_err(|e| Error::io(&eval_path, e))?);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut last_loss = None;
    let mut last_eval = None;
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = train_idx.clone();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let samples: Vec<&SceneSample> = batch.iter().map(|&i| &dataset.samples[i]).collect();
        let tgts: Vec<&SampleTargets> = batch.iter().map(|&i| &targets[i]).collect();
        let (grads, report) = batch_gradients(&model, &trainable, &samples, &tgts, &cfg.weights)?;
        let non_finite_grad = grads
            .values()
            .any(|g| g.data().iter().any(|v| !v.is_finite()));
        if !report.is_finite() || non_finite_grad {
            let dump = out_dir.join(format!("nonfinite_step_{step}.json"));
            let body = serde_json::json!({
                "step": step,
                "batch": batch,
                "loss": report,
                "non_finite_gradient": non_finite_grad,
                "param_norms": param_norms(&model.params),
            });
            std::fs::write(&dump, serde_json::to_vec_pretty(&body)?)
                .map_err(|e| Error::io(&dump, e))?;
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("diagnostics written to {}", dump.display()),
            });
        }
        adam.step(&mut model.params, &grads, cfg.learning_rate);
        let line = StepMetrics { step, loss: report };
        serde_json::to_writer(&mut metrics, &line)?;
        metrics
            .write_all(b"\n")
            .map_err(|e| Error::io(&metrics_path, e))?;
        on_step(&line);
        last_loss = Some(report);

        let periodic = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if periodic || step == cfg.steps {
            let (_, ap) = evaluate_model(&model, &eval_samples, &cfg.eval, cfg.score_threshold)?;
            let record = EvalRecord {
                step,
                split: eval_split.to_string(),
                report: ap.clone(),
            };
            serde_json::to_writer(&mut evals, &record)?;
            evals
                .write_all(b"\n")
                .and_then(|_| evals.flush())
                .map_err(|e| Error::io(&eval_path, e))?;
            last_eval = Some(record);
            if periodic {
                let ck = Checkpoint {
                    config: cfg.clone(),
                    step: step as u64,
                    metrics: CheckpointMetrics {
                        loss: last_loss,
                        eval: Some(ap),
                    },
                    params: model.params.clone(),
                    adam: adam.clone(),
                };
                ck.save(&out_dir.join(format!("checkpoint_{step:06}.ckpt")))?;
            }
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    evals.flush().map_err(|e| Error::io(&eval_path, e))?;

    let checkpoint = Checkpoint {
        config: cfg.clone(),
        step: cfg.steps as u64,
        metrics: CheckpointMetrics {
            loss: last_loss,
            eval: last_eval.as_ref().map(|r| r.report.clone()),
        },
        params: model.params,
        adam,
    };
    let checkpoint_path = out_dir.join("final.ckpt");
    checkpoint.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        checkpoint,
        checkpoint_path,
        metrics_path,
        eval_path,
        final_eval: last_eval.expect("the last step always evaluates"),
    })
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<MapFmModel> {
    let mut model = MapFmModel::new(ck.config.model.clone(), ck.config.seed)?;
    let expected: Vec<&str> = model.params.names().collect();
    let found: Vec<&str> = ck.params.names().collect();
    if expected != found {
        return Err(Error::Checkpoint(
            "params: names differ from the configured model".into(),
        ));
    }
    for (name, t) in ck.params.iter() {
        let slot = model.params.get_mut(name).expect("name checked above");
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape differs from the configured model"
            )));
        }
        *slot = t.clone();
    }
    Ok(model)
}

/// Writes one ScoredMap JSON per scene as `scene_<i>.json`.
pub fn write_predictions(preds: &[ScoredMap], indices: &[usize], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (p, i) in preds.iter().zip(indices) {
        p.write(&dir.join(format!("scene_{i:04}.json")))?;
    }
    Ok(())
}
