//! Runs every setting of one ablation axis on identical data and seeds.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig};
use crate::backbone::{Aggregation, BackboneConfig, FreezePolicy};
use crate::error::{Error, Result};
use crate::map_core::MapClass;
use crate::scene::{build_dataset, load_dataset, sha_hex, DatasetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    ArssOnOff,
    Aggregation,
    FreezePolicy,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [
        AblationVariant::ArssOnOff,
        AblationVariant::Aggregation,
        AblationVariant::FreezePolicy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::ArssOnOff => "arss_on_off",
            AblationVariant::Aggregation => "aggregation",
            AblationVariant::FreezePolicy => "freeze_policy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation variant {s:?}")))
    }

    /// `(setting key, row label, config)` for every setting of the axis.
    fn settings(self, base: &TrainConfig) -> Vec<(String, String, TrainConfig)> {
        match self {
            AblationVariant::ArssOnOff => [
                (false, "MapFM w/o Aux Seg Head"),
                (true, "MapFM w/ Aux Seg Head"),
            ]
            .into_iter()
            .map(|(on, label)| {
                let mut cfg = base.clone();
                cfg.model.arss_enabled = on;
                let key = if on { "arss_on" } else { "arss_off" };
                (key.to_string(), label.to_string(), cfg)
            })
            .collect(),
            AblationVariant::Aggregation => [
                Aggregation::MultiLayerCnn,
                Aggregation::Concat,
                Aggregation::LastLayer,
            ]
            .into_iter()
            .map(|agg| {
                let mut cfg = base.clone();
                cfg.model.backbone = cfg.model.backbone.clone().with_aggregation(agg);
                (
                    agg.name().to_string(),
                    aggregation_label(&cfg.model.backbone),
                    cfg,
                )
            })
            .collect(),
            AblationVariant::FreezePolicy => FreezePolicy::ALL
                .into_iter()
                .map(|policy| {
                    let mut cfg = base.clone();
                    cfg.model.backbone.freeze_policy = policy;
                    let label = match policy {
                        FreezePolicy::Frozen => "Frozen",
                        FreezePolicy::FinetuneLast => "Fine-tune Last Layer",
                        FreezePolicy::Full => "Full Fine-tuning",
                    };
                    (policy.name().to_string(), label.to_string(), cfg)
                })
                .collect(),
        }
    }
}

fn aggregation_label(cfg: &BackboneConfig) -> String {
    let taps = cfg
        .tap_blocks
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    match cfg.aggregation {
        Aggregation::MultiLayerCnn => format!("Multi-layer CNN ({taps})"),
        Aggregation::Concat => format!("Feature concatenation ({taps})"),
        Aggregation::LastLayer => format!("Last Layer Features ({taps})"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub data: DatasetConfig,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            train: TrainConfig::default(),
            data: DatasetConfig {
                num_scenes: 32,
                ..DatasetConfig::default()
            },
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.data.num_scenes == 0 {
            return Err(Error::InvalidConfig("num_scenes must be positive".into()));
        }
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: AblationConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub label: String,
    pub seed: u64,
    pub ap_div: f64,
    pub ap_ped: f64,
    pub ap_bound: f64,
    pub map: f64,
    pub final_loss: f64,
    pub dataset_sha256: String,
    pub config_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub setting: String,
    pub label: String,
    pub seeds: Vec<u64>,
    pub ap_div: f64,
    pub ap_ped: f64,
    pub ap_bound: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub variant: AblationVariant,
    pub dataset_sha256: String,
    pub eval_split: String,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
    /// mAP(on) − mAP(off) per seed and on average; only for `arss_on_off`.
    pub map_delta: Option<MapDelta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapDelta {
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "ablation: {}  (evaluated on {} split)",
            self.variant.name(),
            self.eval_split
        );
        let _ = writeln!(s, "dataset sha256: {}", self.dataset_sha256);
        let width = self
            .summary
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(10)
            .max(13);
        let _ = writeln!(
            s,
            "{:<width$} | {:>8} | {:>8} | {:>8} | {:>8} | seeds",
            "Configuration", "AP_div", "AP_ped", "AP_bound", "mAP"
        );
        for r in &self.summary {
            let seeds = r
                .seeds
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(
                s,
                "{:<width$} | {:>8.1} | {:>8.1} | {:>8.1} | {:>8.1} | {seeds}",
                r.label,
                100.0 * r.ap_div,
                100.0 * r.ap_ped,
                100.0 * r.ap_bound,
                100.0 * r.map
            );
        }
        if let Some(d) = &self.map_delta {
            for (seed, v) in &d.per_seed {
                let _ = writeln!(s, "seed {seed}: mAP(on) - mAP(off) = {:+.1}", 100.0 * v);
            }
            let _ = writeln!(s, "mean mAP delta: {:+.1}", 100.0 * d.mean);
        }
        s
    }
}

/// Builds the dataset once under `out_dir/data`, trains every setting for
/// every seed under `out_dir/runs`, and writes `ablation.json` and
/// `ablation.txt`.
pub fn run_ablation(
    variant: AblationVariant,
    cfg: &AblationConfig,
    out_dir: &Path,
) -> Result<AblationTable> {
    cfg.validate()?;
    let data_dir = out_dir.join("data");
    let manifest = build_dataset(&cfg.data, &data_dir)?;
    let dataset = load_dataset(&data_dir)?;
    let mut rows = Vec::new();
    let mut eval_split = String::new();
    let settings = variant.settings(&cfg.train);
    for (key, label, setting_cfg) in &settings {
        for &seed in &cfg.seeds {
            let mut run_cfg = setting_cfg.clone();
            run_cfg.seed = seed;
            let run_dir = out_dir.join("runs").join(format!("{key}_seed{seed}"));
            let outcome = train(&run_cfg, &dataset, &run_dir, &mut |_| {})?;
            let r = &outcome.final_eval.report;
            eval_split = outcome.final_eval.split.clone();
            rows.push(AblationRow {
                setting: key.clone(),
                label: label.clone(),
                seed,
                ap_div: r.class_ap(MapClass::Divider),
                ap_ped: r.class_ap(MapClass::PedCrossing),
                ap_bound: r.class_ap(MapClass::Boundary),
                map: r.map,
                final_loss: outcome
                    .checkpoint
                    .metrics
                    .loss
                    .map(|l| l.total)
                    .unwrap_or(f64::NAN),
                dataset_sha256: manifest.dataset_sha256.clone(),
                config_sha256: sha_hex(run_cfg.to_toml()?.as_bytes()),
            });
        }
    }
    let summary: Vec<AblationSummary> = settings
        .iter()
        .map(|(key, label, _)| {
            let rs: Vec<&AblationRow> = rows.iter().filter(|r| &r.setting == key).collect();
            let mean =
                |f: fn(&AblationRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
            AblationSummary {
                setting: key.clone(),
                label: label.clone(),
                seeds: rs.iter().map(|r| r.seed).collect(),
                ap_div: mean(|r| r.ap_div),
                ap_ped: mean(|r| r.ap_ped),
                ap_bound: mean(|r| r.ap_bound),
                map: mean(|r| r.map),
            }
        })
        .collect();
    let map_delta = (variant == AblationVariant::ArssOnOff).then(|| {
        let per_seed: Vec<(u64, f64)> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let get = |k: &str| {
                    rows.iter()
                        .find(|r| r.seed == seed && r.setting == k)
                        .map(|r| r.map)
                        .unwrap_or(0.0)
                };
                (seed, get("arss_on") - get("arss_off"))
            })
            .collect();
        let mean = per_seed.iter().map(|p| p.1).sum::<f64>() / per_seed.len() as f64;
        MapDelta { per_seed, mean }
    });
    let table = AblationTable {
        variant,
        dataset_sha256: manifest.dataset_sha256,
        eval_split,
        rows,
        summary,
        map_delta,
    };
    let json = out_dir.join("ablation.json");
    std::fs::write(&json, serde_json::to_vec_pretty(&table)?).map_err(|e| Error::io(&json, e))?;
    let txt = out_dir.join("ablation.txt");
    std::fs::write(&txt, table.to_text()).map_err(|e| Error::io(&txt, e))?;
    Ok(table)
}
