//! Run reports on disk, seed aggregation and table-shaped CSV exports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{WbError, WbResult};
use crate::eval::{BenchReport, Comparison, EvalReport, LatencyRow};

/// F1 standard deviation above which a seed set is flagged unstable.
pub const UNSTABLE_F1_STD: f64 = 0.02;

const AGGREGATE_SUFFIX: &str = "-aggregate.json";

/// Everything one seed of one experiment produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub preset: String,
    /// Setting label shared by all seeds of the same experiment cell.
    pub tag: String,
    pub seed: u64,
    pub dataset: String,
    pub settings: BTreeMap<String, String>,
    pub train_losses: Vec<f32>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    /// Reference evaluation, e.g. before compression or before transfer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<String>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, preset: &str, tag: &str, seed: u64, dataset: &str) -> Self {
        Self {
            command: command.to_string(),
            preset: preset.to_string(),
            tag: tag.to_string(),
            seed,
            dataset: dataset.to_string(),
            settings: BTreeMap::new(),
            train_losses: Vec::new(),
            metrics: BTreeMap::new(),
            eval: None,
            baseline: None,
            comparison: None,
            bench: None,
            model_file: None,
            warnings: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.settings.insert(key.to_string(), value.to_string());
        self
    }

    /// `{command}-{preset}-{dataset}-{tag}-seed{seed}`.
    pub fn stem(&self) -> String {
        format!(
            "{}-seed{}",
            cell_stem(&self.command, &self.preset, &self.dataset, &self.tag),
            self.seed
        )
    }
}

pub fn cell_stem(command: &str, preset: &str, dataset: &str, tag: &str) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    };
    let mut stem = format!("{command}-{preset}-{}", clean(dataset));
    if !tag.is_empty() {
        stem.push('-');
        stem.push_str(&clean(tag));
    }
    stem
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub command: String,
    pub preset: String,
    pub tag: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MeanStd>,
    pub unstable: bool,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<MeanStd>,
}

impl Aggregate {
    pub fn stem(&self) -> String {
        format!(
            "{}-aggregate",
            cell_stem(&self.command, &self.preset, &self.dataset, &self.tag)
        )
    }
}

fn numeric_metrics(r: &RunReport) -> BTreeMap<String, f64> {
    let mut out = r.metrics.clone();
    if let Some(e) = &r.eval {
        for (k, v) in [
            ("loss", e.loss as f64),
            ("precision", e.precision as f64),
            ("recall", e.recall as f64),
            ("f1", e.f1 as f64),
            ("model_bytes", e.model_bytes as f64),
            ("nonzero_params", e.nonzero_params as f64),
            ("pruned_params", e.pruned_params as f64),
            ("sparsity", e.sparsity),
        ] {
            out.insert(k.to_string(), v);
        }
    }
    if let Some(c) = &r.comparison {
        out.insert("f1_delta_points".into(), c.f1_delta_points);
        out.insert("size_reduction_pct".into(), c.size_reduction_pct);
    }
    out
}

/// Mean and population std of every metric shared by the runs of one cell.
pub fn aggregate_runs(reports: &[RunReport], seeds: &[u64]) -> WbResult<Aggregate> {
    let first = reports
        .first()
        .ok_or_else(|| WbError::config("no reports to aggregate"))?;
    if seeds.is_empty() {
        return Err(WbError::config("no seeds to aggregate over"));
    }
    for r in reports {
        if (&r.command, &r.preset, &r.tag, &r.dataset)
            != (&first.command, &first.preset, &first.tag, &first.dataset)
        {
            return Err(WbError::config(format!(
                "cannot aggregate {} with {}",
                r.stem(),
                first.stem()
            )));
        }
        if !seeds.contains(&r.seed) {
            return Err(WbError::config(format!(
                "report {} has unexpected seed {}",
                r.stem(),
                r.seed
            )));
        }
    }
    let mut chosen = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let r = reports
            .iter()
            .find(|r| r.seed == *seed)
            .ok_or_else(|| WbError::config(format!("missing report for seed {seed}")))?;
        chosen.push(numeric_metrics(r));
    }
    let mut metrics = BTreeMap::new();
    for key in chosen[0].keys() {
        let values: Option<Vec<f64>> = chosen.iter().map(|m| m.get(key).copied()).collect();
        if let Some(values) = values {
            metrics.insert(key.clone(), MeanStd::of(&values));
        }
    }
    let mut warnings = Vec::new();
    if seeds.len() == 1 {
        warnings.push(format!(
            "single seed {}: standard deviations are 0",
            seeds[0]
        ));
    }
    let unstable = metrics.get("f1").is_some_and(|f| f.std > UNSTABLE_F1_STD);
    if unstable {
        warnings.push(format!(
            "f1 standard deviation {:.4} exceeds {UNSTABLE_F1_STD}",
            metrics["f1"].std
        ));
    }
    let timing: Option<Vec<f64>> = seeds
        .iter()
        .map(|s| {
            reports
                .iter()
                .find(|r| r.seed == *s)
                .and_then(|r| r.eval.as_ref())
                .and_then(EvalReport::inference_time_ms)
        })
        .collect();
    Ok(Aggregate {
        command: first.command.clone(),
        preset: first.preset.clone(),
        tag: first.tag.clone(),
        dataset: first.dataset.clone(),
        seeds: seeds.to_vec(),
        metrics,
        unstable,
        warnings,
        timing: timing.map(|t| MeanStd::of(&t)),
    })
}

pub fn to_json(value: &impl Serialize) -> WbResult<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> WbResult<()> {
    fs::write(path, to_json(value)?).map_err(|e| WbError::io(path, e))
}

/// Remove every `timing` member, at any depth.
pub fn strip_timing(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.remove("timing");
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// Per-seed run reports in a directory, sorted by file name.
pub fn load_reports(dir: &Path) -> WbResult<Vec<RunReport>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| WbError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && !p.to_string_lossy().ends_with(AGGREGATE_SUFFIX)
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| WbError::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| WbError::Format(format!("{}: not a run report: {e}", p.display())))
        })
        .collect()
}

/// One CSV row per evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub command: String,
    pub preset: String,
    pub tag: String,
    pub lang: String,
    pub seed: u64,
    pub mode: String,
    pub prune_rate: Option<f64>,
    pub loss: f32,
    pub precision: f32,
    pub recall: f32,
    pub f1: f32,
    pub inference_time: Option<f64>,
    pub model_bytes: u64,
    pub nonzero_params: usize,
    pub pruned_params: usize,
    pub sparsity: f64,
}

fn prune_rate(r: &RunReport) -> Option<f64> {
    r.settings.get("sparsity").and_then(|s| s.parse().ok())
}

pub fn run_rows(reports: &[RunReport]) -> Vec<RunRow> {
    reports
        .iter()
        .filter_map(|r| {
            let e = r.eval.as_ref()?;
            Some(RunRow {
                command: r.command.clone(),
                preset: r.preset.clone(),
                tag: r.tag.clone(),
                lang: r.dataset.clone(),
                seed: r.seed,
                mode: e.mode.clone(),
                prune_rate: prune_rate(r),
                loss: e.loss,
                precision: e.precision,
                recall: e.recall,
                f1: e.f1,
                inference_time: e.inference_time_ms(),
                model_bytes: e.model_bytes,
                nonzero_params: e.nonzero_params,
                pruned_params: e.pruned_params,
                sparsity: e.sparsity,
            })
        })
        .collect()
}

/// Seed-averaged pruning results, one row per (sparsity, dataset).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneRow {
    pub prune_rate: f64,
    pub lang: String,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub inference_time: Option<f64>,
    pub pruned_params: u64,
}

pub fn prune_rows(reports: &[RunReport]) -> Vec<PruneRow> {
    let mut groups: BTreeMap<(u64, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.command == "prune") {
        if let (Some(p), Some(e)) = (prune_rate(r), r.eval.as_ref()) {
            groups
                .entry((p.to_bits(), r.dataset.clone()))
                .or_default()
                .push(e);
        }
    }
    let mut rows: Vec<PruneRow> = groups
        .into_iter()
        .map(|((p, lang), evals)| {
            let mean = |f: &dyn Fn(&EvalReport) -> f64| {
                MeanStd::of(&evals.iter().map(|e| f(e)).collect::<Vec<_>>()).mean
            };
            let times: Option<Vec<f64>> = evals.iter().map(|e| e.inference_time_ms()).collect();
            PruneRow {
                prune_rate: f64::from_bits(p),
                lang,
                loss: mean(&|e| e.loss as f64),
                precision: mean(&|e| e.precision as f64),
                recall: mean(&|e| e.recall as f64),
                f1: mean(&|e| e.f1 as f64),
                inference_time: times.map(|t| MeanStd::of(&t).mean),
                pruned_params: mean(&|e| e.pruned_params as f64).round() as u64,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.prune_rate
            .total_cmp(&b.prune_rate)
            .then(a.lang.cmp(&b.lang))
    });
    rows
}

pub fn latency_rows(reports: &[RunReport]) -> Vec<LatencyRow> {
    reports
        .iter()
        .filter_map(|r| r.bench.as_ref().map(BenchReport::latency_row))
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> WbResult<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| WbError::Format(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| WbError::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| WbError::io(path, e))
}
