//! Scored evaluation, latency measurement and baseline-vs-compressed deltas.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use sdcw_core::data::{batch, Sentence, TagSet, TokenizedBatch, Vocabulary};
use sdcw_core::metrics::evaluate_tags;
use sdcw_core::model::{prunable_names, TokenClassifier};
use sdcw_core::quant::{quantize_model_dynamic, quantize_model_int8_mixed, QuantValue};
use sdcw_core::EncoderModel;

use crate::error::{WbError, WbResult};
use crate::persist::{serialized_size, ModelFile, Weights};

/// Truncation length and batch size for evaluation passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub max_seq_len: usize,
    pub batch_size: usize,
}

/// Wall-clock statistics over repeated full passes, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub reps: usize,
    pub warmup: usize,
    pub batches: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub iqr_ms: f64,
    /// Median pass time divided by the batch count.
    pub per_batch_ms: f64,
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: String,
    pub sentences: usize,
    pub loss: f32,
    pub precision: f32,
    pub recall: f32,
    pub f1: f32,
    pub gold_spans: usize,
    pub predicted_spans: usize,
    pub correct_spans: usize,
    pub model_bytes: u64,
    pub total_params: usize,
    pub nonzero_params: usize,
    /// Zeros inside the prunable weight matrices.
    pub pruned_params: usize,
    /// `pruned_params` over the prunable parameter count.
    pub sparsity: f64,
    /// Absent unless timing was requested; never part of determinism checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingStats>,
}

impl EvalReport {
    pub fn inference_time_ms(&self) -> Option<f64> {
        self.timing.as_ref().map(|t| t.median_ms)
    }
}

/// Zeros and element count of the prunable matrices.
pub fn prunable_zeros(weights: &Weights) -> (usize, usize) {
    let names = prunable_names(weights.config());
    let mut zeros = 0;
    let mut total = 0;
    let mut count = |name: &str, values: &[f32]| {
        if names.iter().any(|n| n == name) {
            total += values.len();
            zeros += values.iter().filter(|v| **v == 0.0).count();
        }
    };
    match weights {
        Weights::Dense(m) => m
            .params()
            .iter()
            .for_each(|p| count(&p.name, p.value.data())),
        Weights::Quantized(q) => q.params().iter().for_each(|p| match &p.value {
            QuantValue::Float(t) => count(&p.name, t.data()),
            QuantValue::Int8(_) => count(&p.name, p.value.to_tensor().data()),
        }),
    }
    (zeros, total)
}

/// Score a model on a labeled dataset.
pub fn evaluate(
    file: &ModelFile,
    vocab: &Vocabulary,
    tags: &TagSet,
    dataset: &str,
    sentences: &[Sentence],
    spec: BatchSpec,
) -> WbResult<EvalReport> {
    let weights = &file.weights;
    let result = evaluate_tags(
        weights.classifier(),
        sentences,
        vocab,
        tags,
        spec.max_seq_len,
        spec.batch_size,
    )?;
    let (pruned, prunable) = prunable_zeros(weights);
    let s = result.scores;
    Ok(EvalReport {
        dataset: dataset.to_string(),
        mode: weights.mode_name().to_string(),
        sentences: sentences.len(),
        loss: result.loss,
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        gold_spans: s.gold_spans,
        predicted_spans: s.predicted_spans,
        correct_spans: s.correct_spans,
        model_bytes: serialized_size(file)?,
        total_params: weights.total_params(),
        nonzero_params: weights.nonzero_params(),
        pruned_params: pruned,
        sparsity: if prunable == 0 {
            0.0
        } else {
            pruned as f64 / prunable as f64
        },
        timing: None,
    })
}

/// Linear-interpolated quantile of sorted samples.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn timing_stats(samples_ms: Vec<f64>, warmup: usize, batches: usize) -> TimingStats {
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let median = quantile(&sorted, 0.5);
    TimingStats {
        reps: samples_ms.len(),
        warmup,
        batches,
        median_ms: median,
        mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
        iqr_ms: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        per_batch_ms: median / batches.max(1) as f64,
        samples_ms,
    }
}

/// Time `reps` full passes over pre-built batches after `warmup` untimed ones.
pub fn measure_inference_time(
    model: &dyn TokenClassifier,
    batches: &[TokenizedBatch],
    reps: usize,
    warmup: usize,
) -> WbResult<TimingStats> {
    if reps < 3 {
        return Err(WbError::config(format!(
            "reps must be at least 3, got {reps}"
        )));
    }
    if warmup < 1 {
        return Err(WbError::config("warmup must be at least 1"));
    }
    if batches.is_empty() {
        return Err(WbError::config("nothing to time: no batches"));
    }
    let pass = || -> WbResult<()> {
        for b in batches {
            std::hint::black_box(model.logits(&b.inputs())?);
        }
        Ok(())
    };
    for _ in 0..warmup {
        pass()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        pass()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(timing_stats(samples, warmup, batches.len()))
}

/// Evaluation batches of a dataset, in file order.
pub fn eval_batches(
    sentences: &[Sentence],
    vocab: &Vocabulary,
    tags: &TagSet,
    spec: BatchSpec,
) -> WbResult<Vec<TokenizedBatch>> {
    Ok(batch(
        sentences,
        vocab,
        tags,
        spec.max_seq_len,
        spec.batch_size,
        None,
    )?)
}

/// What a compressed model gains and loses against its baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: String,
    pub baseline_mode: String,
    pub mode: String,
    pub baseline_f1: f32,
    pub f1: f32,
    /// `100 · (f1 − baseline_f1)`.
    pub f1_delta_points: f64,
    pub baseline_bytes: u64,
    pub model_bytes: u64,
    pub size_reduction_pct: f64,
    pub sparsity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<LatencyDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyDelta {
    pub baseline_ms: f64,
    pub compressed_ms: f64,
    pub latency_reduction_pct: f64,
}

fn reduction_pct(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        100.0 * (before - after) / before
    }
}

pub fn compare(baseline: &EvalReport, compressed: &EvalReport) -> WbResult<Comparison> {
    if baseline.dataset != compressed.dataset {
        return Err(WbError::config(format!(
            "cannot compare reports on different datasets: {:?} vs {:?}",
            baseline.dataset, compressed.dataset
        )));
    }
    let timing = match (baseline.inference_time_ms(), compressed.inference_time_ms()) {
        (Some(b), Some(c)) => Some(LatencyDelta {
            baseline_ms: b,
            compressed_ms: c,
            latency_reduction_pct: reduction_pct(b, c),
        }),
        _ => None,
    };
    Ok(Comparison {
        dataset: baseline.dataset.clone(),
        baseline_mode: baseline.mode.clone(),
        mode: compressed.mode.clone(),
        baseline_f1: baseline.f1,
        f1: compressed.f1,
        f1_delta_points: 100.0 * (compressed.f1 as f64 - baseline.f1 as f64),
        baseline_bytes: baseline.model_bytes,
        model_bytes: compressed.model_bytes,
        size_reduction_pct: reduction_pct(
            baseline.model_bytes as f64,
            compressed.model_bytes as f64,
        ),
        sparsity: compressed.sparsity,
        timing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMode {
    pub mode: String,
    pub model_bytes: u64,
    pub timing: TimingStats,
}

/// Latency of one model under fp32, dynamic and mixed int8 inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub dataset: String,
    /// `[batch, seq]` of every timed batch, shared by all modes.
    pub batch_shapes: Vec<[usize; 2]>,
    pub modes: Vec<BenchMode>,
}

/// One row of the latency table: median per-pass milliseconds by mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub lang: String,
    pub baseline: f64,
    pub dynamic: f64,
    pub int8_mixed: f64,
}

impl BenchReport {
    pub fn latency_row(&self) -> LatencyRow {
        let ms = |name: &str| {
            self.modes
                .iter()
                .find(|m| m.mode == name)
                .map_or(f64::NAN, |m| m.timing.median_ms)
        };
        LatencyRow {
            lang: self.dataset.clone(),
            baseline: ms("fp32"),
            dynamic: ms("dynamic"),
            int8_mixed: ms("int8-mixed"),
        }
    }
}

/// Time a dense model and both of its quantized forms on the same batches.
#[allow(clippy::too_many_arguments)]
pub fn bench_quantized(
    model: &EncoderModel,
    threshold: f32,
    dataset: &str,
    sentences: &[Sentence],
    vocab: &Vocabulary,
    tags: &TagSet,
    spec: BatchSpec,
    reps: usize,
    warmup: usize,
) -> WbResult<BenchReport> {
    let batches = eval_batches(sentences, vocab, tags, spec)?;
    let files = [
        ModelFile::dense(model.clone()),
        ModelFile::quantized(quantize_model_dynamic(model)?),
        ModelFile::quantized(quantize_model_int8_mixed(model, threshold)?),
    ];
    let mut modes = Vec::with_capacity(files.len());
    for file in &files {
        modes.push(BenchMode {
            mode: file.weights.mode_name().to_string(),
            model_bytes: serialized_size(file)?,
            timing: measure_inference_time(file.weights.classifier(), &batches, reps, warmup)?,
        });
    }
    Ok(BenchReport {
        dataset: dataset.to_string(),
        batch_shapes: batches.iter().map(|b| [b.batch, b.seq]).collect(),
        modes,
    })
}
