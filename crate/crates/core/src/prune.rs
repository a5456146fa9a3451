//! Unstructured global magnitude pruning.
//!
//! A single threshold is chosen over every in-scope weight so that exactly
//! `round(p·N)` weights are zeroed. Equal magnitudes are ordered by
//! (tensor name, flat index), so the selected set is reproducible.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{
    finetune, prunable_names, train_loop, EncoderModel, StepContext, TrainHooks, TrainSpec,
    TrainTrace,
};

/// Largest supported target sparsity.
pub const MAX_SPARSITY: f64 = 0.99;

/// Binary keep-mask of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMask {
    pub name: String,
    pub shape: Vec<usize>,
    /// `true` keeps the weight.
    pub keep: Vec<bool>,
}

impl TensorMask {
    pub fn pruned(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

/// Per-tensor masks with the global threshold that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub masks: Vec<TensorMask>,
    /// Smallest kept magnitude (0 when nothing is pruned).
    pub threshold: f32,
    pub target_sparsity: f64,
}

impl PruneMask {
    pub fn total(&self) -> usize {
        self.masks.iter().map(|m| m.keep.len()).sum()
    }

    pub fn pruned(&self) -> usize {
        self.masks.iter().map(|m| m.pruned()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&TensorMask> {
        self.masks.iter().find(|m| m.name == name)
    }
}

/// When pruning happens relative to fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneSchedule {
    BeforeFinetune,
    AfterFinetune,
    /// Sparsity ramps cubically over `steps` mask updates spread across
    /// epochs `start_epoch..end_epoch`.
    DuringFinetune {
        start_epoch: usize,
        end_epoch: usize,
        steps: usize,
    },
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if let Self::DuringFinetune {
            start_epoch,
            end_epoch,
            steps,
        } = *self
        {
            if start_epoch >= end_epoch {
                return Err(Error::Parameter(format!(
                    "schedule start epoch {start_epoch} must precede end epoch {end_epoch}"
                )));
            }
            if steps == 0 {
                return Err(Error::Parameter("schedule needs at least one step".into()));
            }
        }
        Ok(())
    }
}

/// Default pruning scope: attention and FFN weight matrices.
pub fn prunable_scope(model: &EncoderModel) -> Vec<String> {
    prunable_names(model.config())
}

/// Number of weights removed at sparsity `p` out of `total`.
pub fn pruned_count(p: f64, total: u64) -> u64 {
    libm::round(p * total as f64) as u64
}

/// Cubic sparsity ramp `p_final · (1 − (1 − τ)³)` for progress `τ ∈ [0, 1]`.
pub fn cubic_ramp(p_final: f64, progress: f64) -> f64 {
    let rest = 1.0 - progress.clamp(0.0, 1.0);
    p_final * (1.0 - rest * rest * rest)
}

fn check_sparsity(p: f64) -> Result<()> {
    if !(0.0..=MAX_SPARSITY).contains(&p) {
        return Err(Error::Parameter(format!(
            "sparsity {p} outside [0, {MAX_SPARSITY}]"
        )));
    }
    Ok(())
}

fn scoped<'m>(
    model: &'m EncoderModel,
    scope: &[String],
) -> Result<Vec<(&'m str, &'m crate::Tensor)>> {
    if scope.is_empty() {
        return Err(Error::Parameter("pruning scope is empty".into()));
    }
    let mut names: Vec<&String> = scope.iter().collect();
    names.sort();
    names.dedup();
    names
        .into_iter()
        .map(|n| {
            model
                .params()
                .iter()
                .find(|p| &p.name == n)
                .map(|p| (p.name.as_str(), &p.value))
                .ok_or_else(|| Error::Parameter(format!("scope names unknown tensor {n}")))
        })
        .collect()
}

/// Global magnitude mask removing exactly `round(p·N)` in-scope weights.
pub fn compute_mask(model: &EncoderModel, p: f64, scope: &[String]) -> Result<PruneMask> {
    check_sparsity(p)?;
    let tensors = scoped(model, scope)?;
    let total: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
    let k = pruned_count(p, total as u64) as usize;
    // (magnitude bits, tensor rank, flat index): for non-negative floats the
    // bit pattern orders like the value.
    let mut order: Vec<(u32, u32, u32)> = Vec::with_capacity(total);
    for (ti, (name, t)) in tensors.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::Data(format!("tensor {name} has non-finite weights")));
        }
        order.extend(
            t.data()
                .iter()
                .enumerate()
                .map(|(i, w)| (w.abs().to_bits(), ti as u32, i as u32)),
        );
    }
    let mut masks: Vec<TensorMask> = tensors
        .iter()
        .map(|(name, t)| TensorMask {
            name: String::from(*name),
            shape: t.shape().to_vec(),
            keep: vec![true; t.numel()],
        })
        .collect();
    let threshold = if k == 0 {
        0.0
    } else {
        order.select_nth_unstable(k - 1);
        for &(_, ti, i) in &order[..k] {
            masks[ti as usize].keep[i as usize] = false;
        }
        if k < total {
            let kept = order[k..].iter().min().map(|e| e.0).unwrap_or(0);
            f32::from_bits(kept)
        } else {
            f32::from_bits(order[k - 1].0)
        }
    };
    Ok(PruneMask {
        masks,
        threshold,
        target_sparsity: p,
    })
}

/// Zero every masked weight in place.
pub fn apply_mask(model: &mut EncoderModel, mask: &PruneMask) -> Result<()> {
    for m in &mask.masks {
        let t = model
            .get(&m.name)
            .ok_or_else(|| Error::Parameter(format!("mask names unknown tensor {}", m.name)))?;
        if t.shape() != m.shape.as_slice() || t.numel() != m.keep.len() {
            return Err(Error::Dimension(format!(
                "mask for {} has shape {:?}, tensor has {:?}",
                m.name,
                m.shape,
                t.shape()
            )));
        }
    }
    for m in &mask.masks {
        if let Some(t) = model.get_mut(&m.name) {
            for (w, keep) in t.data_mut().iter_mut().zip(&m.keep) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
    Ok(())
}

/// Fraction of exact zeros over the in-scope tensors.
pub fn measure_sparsity(model: &EncoderModel, scope: &[String]) -> Result<f64> {
    let tensors = scoped(model, scope)?;
    let total: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
    let zeros: usize = tensors
        .iter()
        .map(|(_, t)| t.numel() - t.count_nonzero())
        .sum();
    Ok(zeros as f64 / total as f64)
}

/// Re-applies a mask after every optimizer step.
struct EnforceMask<'a> {
    mask: &'a PruneMask,
}

impl TrainHooks for EnforceMask<'_> {
    fn after_step(&mut self, model: &mut EncoderModel, _ctx: &StepContext) -> Result<()> {
        apply_mask(model, self.mask)
    }
}

/// Fine-tune while holding masked weights at exactly zero.
pub fn masked_finetune(
    model: &mut EncoderModel,
    mask: &PruneMask,
    examples: &[Example],
    spec: &TrainSpec,
    seed: u64,
) -> Result<TrainTrace> {
    apply_mask(model, mask)?;
    train_loop(model, examples, spec, seed, &mut EnforceMask { mask })
}

/// Result of a scheduled pruning run.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub trace: TrainTrace,
    pub mask: PruneMask,
    /// Sparsity measured right after each mask update.
    pub sparsity_trace: Vec<f64>,
}

/// Recomputes the mask on a cubic ramp and enforces the latest one.
struct GradualPruning<'a> {
    p_final: f64,
    scope: &'a [String],
    steps: usize,
    first_step: usize,
    span: usize,
    done: usize,
    mask: Option<PruneMask>,
    sparsity_trace: Vec<f64>,
}

impl GradualPruning<'_> {
    /// Global step index at which ramp update `j` (0-based) fires.
    fn fire_at(&self, j: usize) -> usize {
        self.first_step + j * self.span / self.steps
    }
}

impl TrainHooks for GradualPruning<'_> {
    fn before_step(&mut self, model: &mut EncoderModel, ctx: &StepContext) -> Result<()> {
        while self.done < self.steps && ctx.global_step >= self.fire_at(self.done) {
            self.done += 1;
            let p = cubic_ramp(self.p_final, self.done as f64 / self.steps as f64);
            let p = if self.done == self.steps {
                self.p_final
            } else {
                p
            };
            let mask = compute_mask(model, p, self.scope)?;
            apply_mask(model, &mask)?;
            self.sparsity_trace
                .push(measure_sparsity(model, self.scope)?);
            self.mask = Some(mask);
        }
        Ok(())
    }

    fn after_step(&mut self, model: &mut EncoderModel, _ctx: &StepContext) -> Result<()> {
        match &self.mask {
            Some(mask) => apply_mask(model, mask),
            None => Ok(()),
        }
    }
}

/// Prune to `p_final` before, after or during fine-tuning.
///
/// `AfterFinetune` prunes the trained model without further training.
pub fn gradual_prune_finetune(
    model: &mut EncoderModel,
    p_final: f64,
    schedule: PruneSchedule,
    scope: &[String],
    examples: &[Example],
    spec: &TrainSpec,
    seed: u64,
) -> Result<PruneOutcome> {
    check_sparsity(p_final)?;
    schedule.validate()?;
    spec.validate()?;
    match schedule {
        PruneSchedule::BeforeFinetune => {
            let mask = compute_mask(model, p_final, scope)?;
            let trace = masked_finetune(model, &mask, examples, spec, seed)?;
            let sparsity_trace = vec![measure_sparsity(model, scope)?];
            Ok(PruneOutcome {
                trace,
                mask,
                sparsity_trace,
            })
        }
        PruneSchedule::AfterFinetune => {
            let trace = finetune(model, examples, spec, seed)?;
            let mask = compute_mask(model, p_final, scope)?;
            apply_mask(model, &mask)?;
            let sparsity_trace = vec![measure_sparsity(model, scope)?];
            Ok(PruneOutcome {
                trace,
                mask,
                sparsity_trace,
            })
        }
        PruneSchedule::DuringFinetune {
            start_epoch,
            end_epoch,
            steps,
        } => {
            if end_epoch > spec.epochs {
                return Err(Error::Parameter(format!(
                    "schedule ends at epoch {end_epoch} but training runs {} epochs",
                    spec.epochs
                )));
            }
            let steps_per_epoch = examples.len().div_ceil(spec.batch_size);
            let mut hook = GradualPruning {
                p_final,
                scope,
                steps,
                first_step: start_epoch * steps_per_epoch,
                span: (end_epoch - start_epoch) * steps_per_epoch,
                done: 0,
                mask: None,
                sparsity_trace: Vec::new(),
            };
            let trace = train_loop(model, examples, spec, seed, &mut hook)?;
            let mask = hook
                .mask
                .ok_or_else(|| Error::Data("pruning schedule never fired".into()))?;
            Ok(PruneOutcome {
                trace,
                mask,
                sparsity_trace: hook.sparsity_trace,
            })
        }
    }
}

/// Zero count per in-scope tensor, keyed by name.
pub fn zeros_per_tensor(model: &EncoderModel, scope: &[String]) -> Result<BTreeMap<String, usize>> {
    Ok(scoped(model, scope)?
        .into_iter()
        .map(|(n, t)| (String::from(n), t.numel() - t.count_nonzero()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::rng::Rng;
    use crate::Tensor;
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 8,
            ffn_size: 16,
            vocab_size: 30,
            max_positions: 12,
            num_classes: 3,
            dropout: 0.0,
        }
    }

    /// One-layer model whose only prunable weight values we set by hand.
    fn with_weights(values: &[f32]) -> (EncoderModel, Vec<String>) {
        let mut m = EncoderModel::init(tiny(), 0).unwrap();
        let name = "layers.0.attention.query.weight".to_string();
        let t = m.get_mut(&name).unwrap();
        t.data_mut().fill(0.0);
        t.data_mut()[..values.len()].copy_from_slice(values);
        (m, vec![name])
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let m = EncoderModel::init(tiny(), 1).unwrap();
        let scope = prunable_scope(&m);
        let mask = compute_mask(&m, 0.0, &scope).unwrap();
        assert_eq!(mask.pruned(), 0);
        assert_eq!(mask.threshold, 0.0);
    }

    #[test]
    fn four_weight_example_at_half() {
        let config = EncoderConfig {
            hidden_size: 2,
            num_heads: 1,
            ffn_size: 2,
            ..tiny()
        };
        let mut m = EncoderModel::init(config, 0).unwrap();
        let name = "layers.0.attention.query.weight";
        *m.get_mut(name).unwrap() = Tensor::from_rows(&[&[-3.0, 1.0], &[-0.5, 2.0]]);
        let mask = compute_mask(&m, 0.5, &[name.to_string()]).unwrap();
        assert_eq!(mask.masks[0].keep, [true, false, false, true]);
        assert!(mask.threshold > 1.0 && mask.threshold <= 2.0);
    }

    #[test]
    fn ties_break_by_name_then_index() {
        let (m, scope) = with_weights(&[]);
        // all 64 weights are zero: the first 10 by index go
        let mask = compute_mask(&m, 10.0 / 64.0, &scope).unwrap();
        let keep = &mask.masks[0].keep;
        assert!(keep[..10].iter().all(|k| !k));
        assert!(keep[10..].iter().all(|k| *k));
    }

    #[test]
    fn out_of_range_sparsity_is_rejected() {
        let m = EncoderModel::init(tiny(), 1).unwrap();
        let scope = prunable_scope(&m);
        assert!(matches!(
            compute_mask(&m, 1.5, &scope),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            compute_mask(&m, -0.1, &scope),
            Err(Error::Parameter(_))
        ));
        assert!(compute_mask(&m, 0.995, &scope).is_err());
    }

    #[test]
    fn table_bookkeeping() {
        let total = 70_785_790u64;
        let published = [
            (0.10, 7_078_579u64),
            (0.20, 14_157_158),
            (0.30, 21_235_738),
            (0.40, 28_314_317),
            (0.50, 35_392_896),
            (0.60, 42_471_475),
            (0.70, 49_550_054),
            (0.80, 56_628_634),
            (0.90, 63_707_213),
            (0.95, 67_246_502),
        ];
        for (p, expect) in published {
            let got = pruned_count(p, total);
            assert!(got.abs_diff(expect) <= 2, "p={p}: {got} vs {expect}");
        }
        assert_eq!(pruned_count(0.10, total), 7_078_579);
    }

    #[test]
    fn apply_is_idempotent_and_identity_for_all_ones() {
        let m = EncoderModel::init(tiny(), 2).unwrap();
        let scope = prunable_scope(&m);
        let mut once = m.clone();
        apply_mask(&mut once, &compute_mask(&m, 0.0, &scope).unwrap()).unwrap();
        assert_eq!(once, m);
        let mask = compute_mask(&m, 0.6, &scope).unwrap();
        let mut a = m.clone();
        apply_mask(&mut a, &mask).unwrap();
        let mut b = a.clone();
        apply_mask(&mut b, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let m = EncoderModel::init(tiny(), 2).unwrap();
        let scope = prunable_scope(&m);
        let mut mask = compute_mask(&m, 0.5, &scope).unwrap();
        mask.masks[1].shape = vec![3, 3];
        let mut target = m.clone();
        match apply_mask(&mut target, &mask) {
            Err(Error::Dimension(msg)) => assert!(msg.contains(&mask.masks[1].name)),
            other => panic!("{other:?}"),
        }
        assert_eq!(target, m);
    }

    #[test]
    fn pruned_forward_equals_manually_zeroed_forward() {
        let m = EncoderModel::init(tiny(), 3).unwrap();
        let scope = prunable_scope(&m);
        let mask = compute_mask(&m, 0.5, &scope).unwrap();
        let mut pruned = m.clone();
        apply_mask(&mut pruned, &mask).unwrap();
        // independent route: zero every in-scope weight below the threshold
        let mut manual = m.clone();
        for name in &scope {
            for w in manual.get_mut(name).unwrap().data_mut() {
                if w.abs() < mask.threshold {
                    *w = 0.0;
                }
            }
        }
        let ids: Vec<u32> = (0..10).map(|i| 4 + i).collect();
        let am = vec![true; 10];
        let inputs = crate::model::Inputs {
            token_ids: &ids,
            attention_mask: &am,
            batch: 2,
            seq: 5,
        };
        assert_eq!(
            pruned.forward(&inputs).unwrap(),
            manual.forward(&inputs).unwrap()
        );
    }

    #[test]
    fn measured_sparsity_after_high_pruning() {
        let m = EncoderModel::init(tiny(), 4).unwrap();
        let scope = prunable_scope(&m);
        assert!(measure_sparsity(&m, &scope).unwrap() < 1e-3);
        let mut p = m.clone();
        apply_mask(&mut p, &compute_mask(&m, 0.95, &scope).unwrap()).unwrap();
        let n = m.config().prunable_param_count() as f64;
        assert!((measure_sparsity(&p, &scope).unwrap() - 0.95).abs() <= 1.0 / n);
    }

    #[test]
    fn cubic_ramp_endpoints() {
        assert_eq!(cubic_ramp(0.8, 0.0), 0.0);
        assert_eq!(cubic_ramp(0.8, 1.0), 0.8);
        assert!((cubic_ramp(0.8, 0.5) - 0.8 * 0.875).abs() < 1e-6);
    }

    #[test]
    fn schedule_validation() {
        let bad = PruneSchedule::DuringFinetune {
            start_epoch: 2,
            end_epoch: 2,
            steps: 1,
        };
        assert!(bad.validate().is_err());
        let bad = PruneSchedule::DuringFinetune {
            start_epoch: 0,
            end_epoch: 2,
            steps: 0,
        };
        assert!(bad.validate().is_err());
    }

    fn toy_examples(n: usize) -> Vec<Example> {
        let mut rng = Rng::seed(8);
        (0..n)
            .map(|_| {
                let token_ids: Vec<u32> = (0..6).map(|_| 4 + rng.below(26) as u32).collect();
                let label_ids = token_ids.iter().map(|t| (t % 3) as i32).collect();
                Example {
                    token_ids,
                    label_ids,
                }
            })
            .collect()
    }

    fn spec(epochs: usize) -> TrainSpec {
        TrainSpec {
            learning_rate: 1e-3,
            batch_size: 4,
            max_seq_len: 12,
            epochs,
            seeds: vec![1],
        }
    }

    #[test]
    fn null_mask_finetune_matches_plain_finetune() {
        let data = toy_examples(12);
        let m = EncoderModel::init(tiny(), 5).unwrap();
        let scope = prunable_scope(&m);
        let mask = compute_mask(&m, 0.0, &scope).unwrap();
        let mut a = m.clone();
        let mut b = m.clone();
        let ta = masked_finetune(&mut a, &mask, &data, &spec(2), 9).unwrap();
        let tb = finetune(&mut b, &data, &spec(2), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn masked_weights_stay_zero_through_training() {
        let data = toy_examples(12);
        let m = EncoderModel::init(tiny(), 5).unwrap();
        let scope = prunable_scope(&m);
        let mask = compute_mask(&m, 0.5, &scope).unwrap();
        let mut t = m.clone();
        masked_finetune(&mut t, &mask, &data, &spec(3), 9).unwrap();
        for tm in &mask.masks {
            let w = t.get(&tm.name).unwrap();
            for (v, k) in w.data().iter().zip(&tm.keep) {
                if !k {
                    assert_eq!(*v, 0.0);
                }
            }
        }
        let zeros: usize = zeros_per_tensor(&t, &scope).unwrap().values().sum();
        assert!(zeros >= mask.pruned());
    }

    #[test]
    fn during_schedule_ramps_monotonically_to_target() {
        let data = toy_examples(16);
        let mut m = EncoderModel::init(tiny(), 6).unwrap();
        let scope = prunable_scope(&m);
        let schedule = PruneSchedule::DuringFinetune {
            start_epoch: 1,
            end_epoch: 3,
            steps: 4,
        };
        let out =
            gradual_prune_finetune(&mut m, 0.7, schedule, &scope, &data, &spec(4), 2).unwrap();
        assert_eq!(out.sparsity_trace.len(), 4);
        assert!(out.sparsity_trace.windows(2).all(|w| w[0] <= w[1]));
        let n = m.config().prunable_param_count() as f64;
        assert!((measure_sparsity(&m, &scope).unwrap() - 0.7).abs() <= 1.0 / n);
        let zeros: usize = zeros_per_tensor(&m, &scope).unwrap().values().sum();
        assert!(zeros as u64 >= pruned_count(0.7, n as u64));
    }

    #[test]
    fn single_step_schedule_is_prune_then_train_from_start_epoch() {
        let data = toy_examples(16);
        let m = EncoderModel::init(tiny(), 6).unwrap();
        let scope = prunable_scope(&m);
        let mut during = m.clone();
        let schedule = PruneSchedule::DuringFinetune {
            start_epoch: 0,
            end_epoch: 2,
            steps: 1,
        };
        gradual_prune_finetune(&mut during, 0.5, schedule, &scope, &data, &spec(2), 3).unwrap();
        let mut before = m.clone();
        gradual_prune_finetune(
            &mut before,
            0.5,
            PruneSchedule::BeforeFinetune,
            &scope,
            &data,
            &spec(2),
            3,
        )
        .unwrap();
        assert_eq!(during, before);
    }

    #[test]
    fn after_schedule_is_finetune_then_prune() {
        let data = toy_examples(16);
        let m = EncoderModel::init(tiny(), 6).unwrap();
        let scope = prunable_scope(&m);
        let mut scheduled = m.clone();
        gradual_prune_finetune(
            &mut scheduled,
            0.9,
            PruneSchedule::AfterFinetune,
            &scope,
            &data,
            &spec(2),
            3,
        )
        .unwrap();
        let mut manual = m.clone();
        finetune(&mut manual, &data, &spec(2), 3).unwrap();
        let mask = compute_mask(&manual, 0.9, &scope).unwrap();
        apply_mask(&mut manual, &mask).unwrap();
        assert_eq!(scheduled, manual);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn exact_count_and_threshold_consistency(seed in 0u64..10_000, level in 0usize..10) {
            let p = [0.1f64, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95][level];
            let m = EncoderModel::init(tiny(), seed).unwrap();
            let scope = prunable_scope(&m);
            let mask = compute_mask(&m, p, &scope).unwrap();
            let n = m.config().prunable_param_count();
            prop_assert_eq!(mask.pruned() as u64, pruned_count(p, n));
            let mut max_pruned = 0.0f32;
            let mut min_kept = f32::INFINITY;
            for tm in &mask.masks {
                for (w, k) in m.get(&tm.name).unwrap().data().iter().zip(&tm.keep) {
                    if *k { min_kept = min_kept.min(w.abs()) } else { max_pruned = max_pruned.max(w.abs()) }
                }
            }
            prop_assert!(max_pruned <= min_kept);
            prop_assert_eq!(mask.threshold, min_kept);
            let mut pruned = m.clone();
            apply_mask(&mut pruned, &mask).unwrap();
            let zeros: usize = zeros_per_tensor(&pruned, &scope).unwrap().values().sum();
            prop_assert_eq!(zeros as u64, pruned_count(p, n));
        }
    }
}
