//! Experiment protocols shared by the CLI and the acceptance suite: run
//! directories, evaluation grids, structured masking, transfer and reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{Group, NoiseSpec, Representation, SplitAxis};
use crate::cnn::ModelKind;
use crate::error::{DataError, ModelError};
use crate::io_util::write_atomic;
use crate::signal::{Dataset, Montage, Recording};
use crate::train::{evaluate, history_csv, mean_std, transfer_protocol, KFoldMetrics, TrainConfig, Trained, TransferMode};

/// One table row: a method under a condition, aggregated over folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub condition: String,
    pub mean: f64,
    pub std: f64,
    #[serde(default)]
    pub folds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    pub version: String,
}

impl Environment {
    pub fn new(seed: u64) -> Self {
        Self { seed, version: env!("CARGO_PKG_VERSION").into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub id: String,
    /// Everything needed to rerun the experiment.
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
    pub environment: Environment,
}

impl ExperimentReport {
    pub fn row(&self, method: &str, condition: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.condition == condition)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        write_atomic(path, text.as_bytes()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.into(), source })
    }
}

/// Named evaluation conditions.
pub fn grid_condition(name: &str) -> Option<NoiseSpec> {
    Some(match name {
        "clean" => NoiseSpec::clean(),
        "shuffled" => NoiseSpec::shuffled(),
        "noisy" => NoiseSpec::noisy(),
        _ => {
            let pct: u32 = name.strip_prefix("noisy")?.parse().ok()?;
            if pct >= 100 {
                return None;
            }
            NoiseSpec::noisy_ratio(pct as f64 / 100.0)
        }
    })
}

pub const GRID: [&str; 5] = ["clean", "noisy", "noisy25", "noisy50", "noisy75"];

/// Written to `run.json` in every training output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub data: PathBuf,
    pub kind: ModelKind,
    pub folds: usize,
    pub config: TrainConfig,
}

/// A trained cross-validation run: one model per fold.
#[derive(Clone, Debug)]
pub struct Run {
    pub manifest: RunManifest,
    pub metrics: KFoldMetrics,
    pub models: Vec<Trained>,
}

pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";

fn parse_json<T: serde::de::DeserializeOwned>(dir: &Path, name: &str, text: &str) -> Result<T, ModelError> {
    serde_json::from_str(text).map_err(|source| ModelError::Data(DataError::Json { path: dir.join(name), source }))
}

fn fold_dir(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold{fold}"))
}

impl Run {
    pub fn method(&self) -> String {
        let mut name = self.manifest.kind.name().to_string();
        if self.manifest.config.augment == crate::train::Augment::Cms {
            name.push_str("+cms");
        }
        name
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            write_atomic(&path, text.as_bytes()).map_err(|e| ModelError::Data(DataError::io(&path, e)))
        };
        put(RUN_FILE, serde_json::to_string_pretty(&self.manifest).expect("serializes"))?;
        put(METRICS_FILE, serde_json::to_string_pretty(&self.metrics).expect("serializes"))?;
        for (f, (model, record)) in self.models.iter().zip(&self.metrics.folds).enumerate() {
            put(&format!("history_fold{f}.csv"), history_csv(&record.history))?;
            model.save(&fold_dir(dir, f))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| ModelError::Data(DataError::io(&path, e)))
        };
        let manifest: RunManifest = parse_json(dir, RUN_FILE, &read(RUN_FILE)?)?;
        let metrics: KFoldMetrics = parse_json(dir, METRICS_FILE, &read(METRICS_FILE)?)?;
        let models = (0..manifest.folds).map(|f| Trained::load(&fold_dir(dir, f))).collect::<Result<Vec<_>, _>>()?;
        if metrics.folds.len() != models.len() {
            return Err(ModelError::Checkpoint(format!("{} folds in metrics, {} checkpoints", metrics.folds.len(), models.len())));
        }
        Ok(Self { manifest, metrics, models })
    }

    fn test_set<'a>(&self, dataset: &'a Dataset, fold: usize) -> Result<Vec<&'a Recording>, ModelError> {
        self.metrics.folds[fold]
            .test_indices
            .iter()
            .map(|&i| {
                dataset
                    .recordings
                    .get(i)
                    .ok_or_else(|| ModelError::Incompatible(format!("run refers to recording {i}, dataset has {}", dataset.recordings.len())))
            })
            .collect()
    }

    /// Per-fold accuracy on each fold's held-out recordings under `noise`.
    pub fn evaluate_folds(&self, dataset: &Dataset, noise: &NoiseSpec, montage: Option<&Montage>) -> Result<Vec<f64>, ModelError> {
        let cfg = &self.manifest.config;
        (0..self.models.len())
            .map(|f| {
                let test = self.test_set(dataset, f)?;
                let r = evaluate(&self.models[f], &test, dataset.class_count(), noise, montage, cfg.window, cfg.class_weighting)?;
                Ok(r.accuracy)
            })
            .collect()
    }

    pub fn row(&self, dataset: &Dataset, condition: &str, noise: &NoiseSpec, montage: Option<&Montage>) -> Result<ReportRow, ModelError> {
        let folds = self.evaluate_folds(dataset, noise, montage)?;
        let (mean, std) = mean_std(&folds);
        Ok(ReportRow { method: self.method(), condition: condition.into(), mean, std, folds })
    }
}

/// Table with one row per (run, condition).
pub fn noisy_grid(runs: &[&Run], dataset: &Dataset, conditions: &[&str], repr: Representation, seed: u64) -> Result<ExperimentReport, ModelError> {
    let mut rows = Vec::new();
    for run in runs {
        for &name in conditions {
            let noise = grid_condition(name).ok_or_else(|| ModelError::Config(format!("unknown grid condition {name}")))?;
            rows.push(run.row(dataset, name, &noise.with_representation(repr).with_seed(seed), None)?);
        }
    }
    let config = serde_json::json!({
        "conditions": conditions,
        "representation": repr,
        "runs": runs.iter().map(|r| &r.manifest).collect::<Vec<_>>(),
    });
    Ok(ExperimentReport { id: "noisy-grid".into(), config, rows, environment: Environment::new(seed) })
}

pub fn structured_condition(axis: SplitAxis, group: Group) -> String {
    let a = match axis {
        SplitAxis::Horizontal => "horizontal",
        SplitAxis::Vertical => "vertical",
    };
    let g = match group {
        Group::A => "A",
        Group::B => "B",
    };
    format!("{a}/group_{g}")
}

/// Clean accuracy plus both halves along each requested axis.
pub fn structured_masking(
    runs: &[&Run],
    dataset: &Dataset,
    montage: &Montage,
    axes: &[SplitAxis],
    repr: Representation,
) -> Result<ExperimentReport, ModelError> {
    if montage.len() != dataset.channels() {
        return Err(ModelError::Data(DataError::InvalidDataset(format!(
            "montage has {} entries for {} channels",
            montage.len(),
            dataset.channels()
        ))));
    }
    let mut rows = Vec::new();
    for run in runs {
        rows.push(run.row(dataset, "clean", &NoiseSpec::clean(), None)?);
        for &axis in axes {
            for group in [Group::A, Group::B] {
                let noise = NoiseSpec::structured(axis, group).with_representation(repr);
                rows.push(run.row(dataset, &structured_condition(axis, group), &noise, Some(montage))?);
            }
        }
    }
    let config = serde_json::json!({
        "axes": axes,
        "representation": repr,
        "montage": montage,
        "runs": runs.iter().map(|r| &r.manifest).collect::<Vec<_>>(),
    });
    Ok(ExperimentReport { id: "structured-mask".into(), config, rows, environment: Environment::new(0) })
}

/// Transfers every fold model of `source` to `target`, and reports the mean
/// over source folds next to an in-domain reference.
pub fn transfer(
    source: &Run,
    target: &Dataset,
    mode: TransferMode,
    cfg: &TrainConfig,
    k: usize,
    in_domain: Option<&KFoldMetrics>,
) -> Result<ExperimentReport, ModelError> {
    let mut accs = Vec::new();
    for model in &source.models {
        let m = transfer_protocol(model, target, mode, cfg, k)?;
        accs.extend(m.folds.iter().map(|f| f.test_accuracy));
    }
    let (mean, std) = mean_std(&accs);
    let condition = match mode {
        TransferMode::Fixed => "fixed",
        TransferMode::Finetune => "finetune",
    };
    let mut rows = vec![ReportRow { method: source.method(), condition: condition.into(), mean, std, folds: accs }];
    if let Some(m) = in_domain {
        let folds: Vec<f64> = m.folds.iter().map(|f| f.test_accuracy).collect();
        rows.push(ReportRow { method: m.model.kind.name().into(), condition: "in-domain".into(), mean: m.mean, std: m.std, folds });
    }
    let config = serde_json::json!({
        "source": source.manifest,
        "target": target.manifest.name,
        "mode": mode,
        "train": cfg,
        "folds": k,
    });
    Ok(ExperimentReport { id: "transfer".into(), config, rows, environment: Environment::new(cfg.seed) })
}

/// Merges reports that share an id; rows are appended in input order.
pub fn merge_reports(reports: Vec<ExperimentReport>) -> Result<ExperimentReport, ModelError> {
    let mut iter = reports.into_iter();
    let mut merged = iter.next().ok_or_else(|| ModelError::Config("no reports to merge".into()))?;
    let mut configs = vec![merged.config.clone()];
    for r in iter {
        if r.id != merged.id {
            return Err(ModelError::Config(format!("cannot merge experiment '{}' with '{}'", r.id, merged.id)));
        }
        configs.push(r.config);
        merged.rows.extend(r.rows);
    }
    if configs.len() > 1 {
        merged.config = serde_json::Value::Array(configs);
    }
    Ok(merged)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Markdown,
}

/// Renders a report; markdown is a method-by-condition table of `mean ± std`.
pub fn render(report: &ExperimentReport, format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(report).expect("report serializes"),
        Format::Csv => {
            let mut out = String::from("experiment,method,condition,mean,std\n");
            for r in &report.rows {
                out.push_str(&format!("{},{},{},{:.6},{:.6}\n", report.id, r.method, r.condition, r.mean, r.std));
            }
            out
        }
        Format::Markdown => {
            let (methods, conditions) = axes(report);
            let cells: BTreeMap<(&str, &str), &ReportRow> =
                report.rows.iter().map(|r| ((r.method.as_str(), r.condition.as_str()), r)).collect();
            let mut out = format!("### {}\n\n| Method |", report.id);
            for c in &conditions {
                out.push_str(&format!(" {c} |"));
            }
            out.push_str("\n|---|");
            out.push_str(&"---|".repeat(conditions.len()));
            out.push('\n');
            for m in &methods {
                out.push_str(&format!("| {m} |"));
                for c in &conditions {
                    match cells.get(&(m.as_str(), c.as_str())) {
                        Some(r) => out.push_str(&format!(" {:.3} ± {:.3} |", r.mean, r.std)),
                        None => out.push_str(" - |"),
                    }
                }
                out.push('\n');
            }
            out
        }
    }
}

/// Methods and conditions in first-appearance order.
pub fn axes(report: &ExperimentReport) -> (Vec<String>, Vec<String>) {
    let mut methods: Vec<String> = Vec::new();
    let mut conditions: Vec<String> = Vec::new();
    for r in &report.rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        if !conditions.contains(&r.condition) {
            conditions.push(r.condition.clone());
        }
    }
    (methods, conditions)
}
