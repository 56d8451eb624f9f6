//! `mapfm` command-line front end: dataset generation, training, evaluation,
//! ablations and plots.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mapfm_core::evaluator::{evaluate, ApReport, EvalConfig};
use mapfm_core::map_core::{ScoredMap, VectorMap};
use mapfm_core::scene::{build_dataset, load_dataset, DatasetConfig};
use mapfm_core::trainer::{
    model_from_checkpoint, predict_samples, run_ablation, train, write_predictions, AblationConfig,
    AblationVariant, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "mapfm",
    version,
    about = "Desk-scale vectorized HD-map construction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score predicted maps against ground truth.
    Eval(EvalArgs),
    /// Run every setting of one ablation axis.
    Ablate(AblateArgs),
    /// Render loss curves and AP bars as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenes; overrides the config file.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    num_scenes: Option<u64>,
    /// Dataset config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Prediction file or directory of `scene_*.json` files.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth map file, directory of map files, or dataset directory.
    #[arg(long)]
    gt: PathBuf,
    /// Comma-separated Chamfer thresholds in metres.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0, 1.5])]
    thresholds: Vec<f64>,
    /// Directory for `ap_report.json` and `ap_table.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// One of arss_on_off, aggregation, freeze_policy.
    #[arg(long, value_parser = parse_variant)]
    variant: AblationVariant,
    /// Ablation config (TOML) with `[train]`, `[data]` and `seeds`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// `metrics.jsonl` from a training run.
    #[arg(long)]
    metrics: PathBuf,
    /// `eval.jsonl` or an AP report; defaults to `eval.jsonl` beside the metrics.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<AblationVariant, String> {
    AblationVariant::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Plot(a) => plot::run(&a.metrics, a.eval.as_deref(), &a.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let threads = match std::env::var("MAPFM_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("MAPFM_THREADS must be a positive integer, got {v:?}"))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_gen(a: GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<DatasetConfig>(&text)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => DatasetConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let Some(n) = a.num_scenes {
        cfg.num_scenes = n as usize;
    }
    if cfg.num_scenes == 0 {
        bail!("num_scenes must be positive");
    }
    let manifest = build_dataset(&cfg, &a.out)?;
    println!(
        "wrote {} scenes to {} (sha256 {})",
        manifest.scenes.len(),
        a.out.display(),
        manifest.dataset_sha256
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    let dataset = load_dataset(&a.data)?;
    let total = cfg.steps;
    let every = (total / 20).max(1);
    let outcome = train(&cfg, &dataset, &a.out, &mut |m| {
        if m.step % every == 0 || m.step == total {
            eprintln!("step {}/{} loss {:.4}", m.step, total, m.loss.total);
        }
    })?;
    let model = model_from_checkpoint(&outcome.checkpoint)?;
    let all: Vec<_> = dataset.samples.iter().collect();
    let indices: Vec<usize> = (0..all.len()).collect();
    let preds = predict_samples(&model, &all, cfg.score_threshold)?;
    write_predictions(&preds, &indices, &a.out.join("predictions"))?;
    let report = &outcome.final_eval.report;
    report.write(&a.out.join("ap_report.json"))?;
    std::fs::write(a.out.join("ap_table.txt"), report.to_table())?;
    println!(
        "evaluated on {} split at step {}",
        outcome.final_eval.split, outcome.final_eval.step
    );
    print!("{}", report.to_table());
    Ok(())
}

/// Named pairs of (prediction, ground truth) maps.
fn load_pairs(pred: &Path, gt: &Path) -> Result<(Vec<ScoredMap>, Vec<VectorMap>)> {
    if pred.is_file() {
        if !gt.is_file() {
            bail!("--pred is a file, so --gt must be a map file");
        }
        return Ok((vec![ScoredMap::read(pred)?], vec![VectorMap::read(gt)?]));
    }
    let mut names: Vec<String> = std::fs::read_dir(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no prediction files in {}", pred.display());
    }
    let dataset_layout = gt.join("manifest.json").is_file();
    let mut preds = Vec::with_capacity(names.len());
    let mut gts = Vec::with_capacity(names.len());
    for name in &names {
        let stem = name.trim_end_matches(".json");
        let gt_path = if dataset_layout {
            gt.join(stem).join("gt_map.json")
        } else {
            gt.join(name)
        };
        if !gt_path.is_file() {
            bail!(
                "no ground truth for {name} (looked for {})",
                gt_path.display()
            );
        }
        preds.push(ScoredMap::read(&pred.join(name))?);
        gts.push(VectorMap::read(&gt_path)?);
    }
    Ok((preds, gts))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let cfg = EvalConfig {
        thresholds: a.thresholds,
        ..EvalConfig::default()
    };
    cfg.validate()?;
    let (preds, gts) = load_pairs(&a.pred, &a.gt)?;
    let report: ApReport = evaluate(&preds, &gts, &cfg)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        report.write(&out.join("ap_report.json"))?;
        std::fs::write(out.join("ap_table.txt"), report.to_table())?;
    }
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => AblationConfig::read(p)?,
        None => AblationConfig::default(),
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let table = run_ablation(a.variant, &cfg, &a.out)?;
    print!("{}", table.to_text());
    Ok(())
}
