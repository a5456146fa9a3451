use alloc::format;
use alloc::vec::Vec;

use super::forward::{classify, encode, mlm_logits, mlm_mask_batch, BoundParams, Dropout};
use super::EncoderModel;
use crate::data::{batch_examples, Example, TokenizedBatch, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{AdamConfig, AdamState, Tape, Var};

/// Optimization hyperparameters shared by every training workflow.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
}

impl TrainSpec {
    /// Full-scale NER fine-tuning setup.
    pub fn paper() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 16,
            max_seq_len: 164,
            epochs: 50,
            seeds: alloc::vec![1, 3, 5],
        }
    }

    /// Small-model preset: the tiny desk encoder needs a larger step to learn
    /// in five epochs.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_seq_len: 64,
            epochs: 5,
            seeds: alloc::vec![1, 3, 5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Parameter("seeds must not be empty".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Parameter("max_seq_len must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Parameter(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Mean training loss of every epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f32>,
}

/// Position of the optimizer within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub epoch: usize,
    /// Step index within the epoch.
    pub step: usize,
    pub steps_per_epoch: usize,
    /// Index of this step counted from the start of the run.
    pub global_step: usize,
}

/// Callbacks that let pruning schedules act on the model during training.
pub trait TrainHooks {
    fn before_epoch(&mut self, _model: &mut EncoderModel, _epoch: usize) -> Result<()> {
        Ok(())
    }

    fn before_step(&mut self, _model: &mut EncoderModel, _ctx: &StepContext) -> Result<()> {
        Ok(())
    }

    fn after_step(&mut self, _model: &mut EncoderModel, _ctx: &StepContext) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Masked-LM corruption rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmMasking {
    /// Fraction of real tokens selected for prediction.
    pub rate: f32,
    /// Of the selected tokens: replaced by `<mask>`.
    pub mask_prob: f32,
    /// Of the selected tokens: replaced by a random regular token.
    pub random_prob: f32,
}

impl Default for MlmMasking {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

/// Per-batch loss builder for [`train_loop`].
///
/// Receives the tape, the model bound onto it, the batch, the dropout
/// settings and a random stream for anything else (e.g. MLM masking).
pub(crate) type LossFn<'f> = dyn FnMut(
        &mut Tape,
        &mut BoundParams<'_>,
        &TokenizedBatch,
        &mut Option<Dropout<'_>>,
        &mut Rng,
    ) -> Result<Var>
    + 'f;

/// Adam over shuffled mini-batches with a caller-supplied loss.
///
/// Randomness: the batch order of each epoch and the dropout/masking stream
/// are forked from `seed`, so identical inputs replay bit-for-bit.
pub(crate) fn train_with(
    model: &mut EncoderModel,
    examples: &[Example],
    spec: &TrainSpec,
    seed: u64,
    loss_fn: &mut LossFn<'_>,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainTrace> {
    spec.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut root = Rng::seed(seed);
    let mut shuffle_rng = root.fork(1);
    let mut noise_rng = root.fork(2);
    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(spec.learning_rate),
        model.params().iter().map(|p| p.value.numel()),
    );
    let rate = model.config().dropout;
    let steps_per_epoch = examples.len().div_ceil(spec.batch_size);
    let mut trace = TrainTrace::default();
    let mut global_step = 0;
    for epoch in 0..spec.epochs {
        hooks.before_epoch(model, epoch)?;
        let batches = batch_examples(
            examples,
            spec.max_seq_len,
            spec.batch_size,
            Some(shuffle_rng.next_u64()),
        )?;
        let mut total = 0.0f64;
        for (step, batch) in batches.iter().enumerate() {
            let ctx = StepContext {
                epoch,
                step,
                steps_per_epoch,
                global_step,
            };
            hooks.before_step(model, &ctx)?;
            let mut tape = Tape::new();
            let mut bound = BoundParams::new(model, true);
            let mut dropout = Some(Dropout {
                rate,
                rng: &mut noise_rng,
            });
            let loss = {
                let mut split = noise_split(&mut dropout);
                loss_fn(&mut tape, &mut bound, batch, &mut dropout, &mut split)?
            };
            total += tape.value(loss).item() as f64;
            tape.backward(loss)?;
            let vars = bound.into_vars();
            let grads: Vec<Option<&[f32]>> =
                vars.iter().map(|v| v.and_then(|v| tape.grad(v))).collect();
            let mut params: Vec<(&str, &mut crate::tensor::Tensor)> = model
                .params_mut()
                .iter_mut()
                .map(|p| (p.name.as_str(), &mut p.value))
                .collect();
            adam.update(&mut params, &grads)?;
            hooks.after_step(model, &ctx)?;
            global_step += 1;
        }
        trace
            .epoch_losses
            .push((total / batches.len() as f64) as f32);
    }
    Ok(trace)
}

/// Child stream for non-dropout randomness, drawn from the dropout stream.
fn noise_split(dropout: &mut Option<Dropout<'_>>) -> Rng {
    match dropout {
        Some(d) => d.rng.fork(3),
        None => Rng::seed(0),
    }
}

/// Token-level cross-entropy on the classifier, padding ignored.
pub(crate) fn ner_loss(
    tape: &mut Tape,
    bound: &mut BoundParams<'_>,
    batch: &TokenizedBatch,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let (hidden, _) = encode(bound, tape, &batch.inputs(), dropout)?;
    let logits = classify(bound, tape, hidden)?;
    tape.cross_entropy(logits, &batch.label_ids, IGNORE_INDEX)
}

/// Generic training loop with hooks around each epoch and optimizer step.
///
/// The loss is plain token-classification cross-entropy; pruning schedules
/// use the hooks to enforce and update masks.
pub fn train_loop(
    model: &mut EncoderModel,
    examples: &[Example],
    spec: &TrainSpec,
    seed: u64,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainTrace> {
    train_with(
        model,
        examples,
        spec,
        seed,
        &mut |tape, bound, batch, dropout, _| ner_loss(tape, bound, batch, dropout),
        hooks,
    )
}

/// Fine-tune for token classification with cross-entropy on real tokens.
pub fn finetune(
    model: &mut EncoderModel,
    examples: &[Example],
    spec: &TrainSpec,
    seed: u64,
) -> Result<TrainTrace> {
    train_loop(model, examples, spec, seed, &mut NoHooks)
}

/// Masked-language-model pretraining with the tied decoder.
///
/// Only `token_ids` of the examples are used.
pub fn pretrain_mlm(
    model: &mut EncoderModel,
    examples: &[Example],
    spec: &TrainSpec,
    masking: MlmMasking,
    seed: u64,
) -> Result<TrainTrace> {
    let vocab_size = model.config().vocab_size;
    train_with(
        model,
        examples,
        spec,
        seed,
        &mut |tape, bound, batch, dropout, rng| {
            let (ids, rows, targets) = mlm_mask_batch(
                &batch.token_ids,
                &batch.attention_mask,
                &masking,
                vocab_size,
                rng,
            );
            let mut inputs = batch.inputs();
            inputs.token_ids = &ids;
            let (hidden, _) = encode(bound, tape, &inputs, dropout)?;
            let logits = mlm_logits(bound, tape, hidden, &rows)?;
            tape.cross_entropy(logits, &targets, IGNORE_INDEX)
        },
        &mut NoHooks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{batch_examples, Example};
    use crate::model::EncoderConfig;
    use alloc::vec;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 16,
            ffn_size: 32,
            vocab_size: 40,
            max_positions: 16,
            num_classes: 3,
            dropout: 0.0,
        }
    }

    /// Label is 1 for even token ids, 2 for odd ones above 20, else 0.
    fn toy_examples(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = Rng::seed(seed);
        (0..n)
            .map(|_| {
                let len = 3 + rng.below(6);
                let token_ids: Vec<u32> = (0..len).map(|_| 4 + rng.below(36) as u32).collect();
                let label_ids = token_ids
                    .iter()
                    .map(|t| {
                        if t % 2 == 0 {
                            1
                        } else if *t > 20 {
                            2
                        } else {
                            0
                        }
                    })
                    .collect();
                Example {
                    token_ids,
                    label_ids,
                }
            })
            .collect()
    }

    fn spec(lr: f32, epochs: usize, batch_size: usize) -> TrainSpec {
        TrainSpec {
            learning_rate: lr,
            batch_size,
            max_seq_len: 16,
            epochs,
            seeds: vec![1],
        }
    }

    fn batch_loss(model: &EncoderModel, examples: &[Example]) -> f32 {
        let b = &batch_examples(examples, 16, 64, None).unwrap()[0];
        let mut tape = Tape::new();
        let mut bound = BoundParams::new(model, false);
        ner_loss(&mut tape, &mut bound, b, &mut None)
            .map(|v| tape.value(v).item())
            .unwrap()
    }

    #[test]
    fn one_epoch_on_one_batch_reduces_its_loss() {
        let data = toy_examples(8, 1);
        let mut m = EncoderModel::init(tiny(), 2).unwrap();
        let before = batch_loss(&m, &data);
        finetune(&mut m, &data, &spec(1e-3, 1, 8), 7).unwrap();
        assert!(batch_loss(&m, &data) < before);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = toy_examples(10, 1);
        let mut m = EncoderModel::init(tiny(), 2).unwrap();
        let orig = m.clone();
        finetune(&mut m, &data, &spec(0.0, 2, 4), 7).unwrap();
        assert_eq!(m, orig);
    }

    #[test]
    fn loss_falls_on_learnable_data() {
        let data = toy_examples(64, 3);
        let mut m = EncoderModel::init(tiny(), 2).unwrap();
        let trace = finetune(&mut m, &data, &spec(3e-3, 6, 8), 1).unwrap();
        assert_eq!(trace.epoch_losses.len(), 6);
        assert!(
            trace.epoch_losses[5] < 0.5 * trace.epoch_losses[0],
            "{:?}",
            trace.epoch_losses
        );
    }

    #[test]
    fn seeds_give_distinct_reproducible_traces() {
        let data = toy_examples(24, 3);
        let mut cfg = tiny();
        cfg.dropout = 0.1;
        let run = |seed| {
            let mut m = EncoderModel::init(cfg, seed).unwrap();
            finetune(&mut m, &data, &spec(1e-3, 2, 8), seed).unwrap()
        };
        let traces: Vec<TrainTrace> = [1, 3, 5].iter().map(|s| run(*s)).collect();
        assert_eq!(traces[0], run(1));
        assert_ne!(traces[0], traces[1]);
        assert_ne!(traces[1], traces[2]);
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let mut m = EncoderModel::init(tiny(), 2).unwrap();
        assert!(matches!(
            finetune(&mut m, &[], &spec(1e-3, 1, 4), 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn label_beyond_classes_is_rejected() {
        let mut m = EncoderModel::init(tiny(), 2).unwrap();
        let bad = [Example {
            token_ids: vec![5, 6],
            label_ids: vec![0, 7],
        }];
        assert!(finetune(&mut m, &bad, &spec(1e-3, 1, 4), 1).is_err());
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut m = EncoderModel::init(tiny(), 2).unwrap();
        let data = toy_examples(4, 1);
        assert!(matches!(
            finetune(&mut m, &data, &spec(1e-3, 0, 4), 1),
            Err(Error::Parameter(_))
        ));
        let mut s = spec(1e-3, 1, 4);
        s.seeds.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn mlm_pretraining_learns_repeated_text() {
        let mut rng = Rng::seed(4);
        let data: Vec<Example> = (0..32)
            .map(|_| {
                let start = 4 + rng.below(20) as u32;
                let token_ids: Vec<u32> = (start..start + 10).collect();
                Example {
                    label_ids: vec![0; token_ids.len()],
                    token_ids,
                }
            })
            .collect();
        let mut m = EncoderModel::init(tiny(), 2).unwrap();
        let trace =
            pretrain_mlm(&mut m, &data, &spec(3e-3, 8, 8), MlmMasking::default(), 1).unwrap();
        assert!(
            trace.epoch_losses[7] < trace.epoch_losses[0],
            "{:?}",
            trace.epoch_losses
        );
    }
}
