use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{EncoderConfig, EncoderModel, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{AttentionDims, Tape, Tensor, Var};

/// Token ids and padding mask of a `[batch × seq]` input, row-major.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub token_ids: &'a [u32],
    /// True on real tokens; false keys receive no attention.
    pub attention_mask: &'a [bool],
    pub batch: usize,
    pub seq: usize,
}

impl Inputs<'_> {
    fn check(&self, config: &EncoderConfig) -> Result<()> {
        let n = self.batch * self.seq;
        if n == 0 || self.token_ids.len() != n || self.attention_mask.len() != n {
            return Err(Error::Dimension(format!(
                "inputs of {} ids and {} mask entries for batch {} x seq {}",
                self.token_ids.len(),
                self.attention_mask.len(),
                self.batch,
                self.seq
            )));
        }
        if self.seq > config.max_positions {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_positions {}",
                self.seq, config.max_positions
            )));
        }
        Ok(())
    }
}

/// Anything that maps a batch of token ids to per-token class logits.
pub trait TokenClassifier {
    fn config(&self) -> &EncoderConfig;

    /// Logits shaped `[batch, seq, num_classes]`.
    fn logits(&self, inputs: &Inputs<'_>) -> Result<Tensor>;
}

/// Source of the weights used by a forward pass.
///
/// The fp32 model binds its tensors as tape leaves; quantized models
/// substitute their own linear and attention kernels.
pub(crate) trait Backend {
    fn config(&self) -> &EncoderConfig;

    /// A full-precision tensor (embeddings, norms) as a tape node.
    fn tensor(&mut self, tape: &mut Tape, name: &str) -> Result<Var>;

    /// `x · W + b` for the linear layer named `prefix`.
    fn linear(&mut self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var>;

    fn attention(
        &mut self,
        tape: &mut Tape,
        qkv: [Var; 3],
        dims: AttentionDims,
        key_mask: &[bool],
    ) -> Result<Var> {
        tape.attention(qkv[0], qkv[1], qkv[2], dims, key_mask)
    }
}

/// Model parameters bound lazily onto a tape.
pub(crate) struct BoundParams<'m> {
    model: &'m EncoderModel,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'m> BoundParams<'m> {
    pub(crate) fn new(model: &'m EncoderModel, trainable: bool) -> Self {
        Self {
            model,
            vars: vec![None; model.params().len()],
            trainable,
        }
    }

    /// Tape node of every parameter that took part in the pass.
    pub(crate) fn into_vars(self) -> Vec<Option<Var>> {
        self.vars
    }
}

impl Backend for BoundParams<'_> {
    fn config(&self) -> &EncoderConfig {
        self.model.config()
    }

    fn tensor(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self
            .model
            .index_of(name)
            .ok_or_else(|| Error::Data(format!("model has no parameter {name}")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let v = tape.leaf(self.model.params()[i].value.clone(), self.trainable);
        self.vars[i] = Some(v);
        Ok(v)
    }

    fn linear(&mut self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w = self.tensor(tape, &format!("{prefix}.weight"))?;
        let b = self.tensor(tape, &format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Inverted dropout driven by a dedicated random stream.
pub(crate) struct Dropout<'r> {
    pub rate: f32,
    pub rng: &'r mut Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - self.rate);
        let n = tape.value(x).numel();
        let keep = (0..n)
            .map(|_| {
                if self.rng.bernoulli(self.rate) {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        tape.dropout(x, keep)
    }
}

fn maybe_dropout(dropout: &mut Option<Dropout<'_>>, tape: &mut Tape, x: Var) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

fn layer_norm<B: Backend + ?Sized>(
    backend: &mut B,
    tape: &mut Tape,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let gain = backend.tensor(tape, &format!("{prefix}.gain"))?;
    let bias = backend.tensor(tape, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

/// Word plus position embeddings, normalized: `[batch·seq × hidden]`.
pub(crate) fn embed<B: Backend + ?Sized>(
    backend: &mut B,
    tape: &mut Tape,
    inputs: &Inputs<'_>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    inputs.check(backend.config())?;
    let words = backend.tensor(tape, "embeddings.word")?;
    let positions = backend.tensor(tape, "embeddings.position")?;
    let w = tape.embedding(words, inputs.token_ids)?;
    let position_ids: Vec<u32> = (0..inputs.batch)
        .flat_map(|_| 0..inputs.seq as u32)
        .collect();
    let p = tape.embedding(positions, &position_ids)?;
    let x = tape.add(w, p)?;
    let x = layer_norm(backend, tape, x, "embeddings.norm")?;
    maybe_dropout(dropout, tape, x)
}

/// One post-LN encoder block. Returns the block output and its attention node.
pub(crate) fn encoder_layer<B: Backend + ?Sized>(
    backend: &mut B,
    tape: &mut Tape,
    layer: usize,
    x: Var,
    inputs: &Inputs<'_>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Var, Var)> {
    let config = *backend.config();
    let dims = AttentionDims {
        batch: inputs.batch,
        seq: inputs.seq,
        heads: config.num_heads,
        head_dim: config.head_dim(),
    };
    let p = format!("layers.{layer}");
    let q = backend.linear(tape, x, &format!("{p}.attention.query"))?;
    let k = backend.linear(tape, x, &format!("{p}.attention.key"))?;
    let v = backend.linear(tape, x, &format!("{p}.attention.value"))?;
    let ctx = backend.attention(tape, [q, k, v], dims, inputs.attention_mask)?;
    let o = backend.linear(tape, ctx, &format!("{p}.attention.output"))?;
    let o = maybe_dropout(dropout, tape, o)?;
    let h = tape.add(x, o)?;
    let h = layer_norm(backend, tape, h, &format!("{p}.attention.norm"))?;
    let f = backend.linear(tape, h, &format!("{p}.ffn.up"))?;
    let f = tape.gelu(f)?;
    let f = backend.linear(tape, f, &format!("{p}.ffn.down"))?;
    let f = maybe_dropout(dropout, tape, f)?;
    let out = tape.add(h, f)?;
    let out = layer_norm(backend, tape, out, &format!("{p}.ffn.norm"))?;
    Ok((out, ctx))
}

/// Final hidden states `[batch·seq × hidden]` plus each layer's attention node.
pub(crate) fn encode<B: Backend + ?Sized>(
    backend: &mut B,
    tape: &mut Tape,
    inputs: &Inputs<'_>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Var, Vec<Var>)> {
    let mut x = embed(backend, tape, inputs, dropout)?;
    let mut attention = Vec::with_capacity(backend.config().num_layers);
    for layer in 0..backend.config().num_layers {
        let (out, att) = encoder_layer(backend, tape, layer, x, inputs, dropout)?;
        x = out;
        attention.push(att);
    }
    Ok((x, attention))
}

/// Token-classification logits `[rows × num_classes]`.
pub(crate) fn classify<B: Backend + ?Sized>(
    backend: &mut B,
    tape: &mut Tape,
    hidden: Var,
) -> Result<Var> {
    backend.linear(tape, hidden, "classifier")
}

/// Masked-LM logits over the vocabulary for the selected rows, decoded with
/// the word embedding matrix.
pub(crate) fn mlm_logits<B: Backend + ?Sized>(
    backend: &mut B,
    tape: &mut Tape,
    hidden: Var,
    rows: &[usize],
) -> Result<Var> {
    let selected = tape.select_rows(hidden, rows)?;
    let words = backend.tensor(tape, "embeddings.word")?;
    tape.matmul_bt(selected, words)
}

/// Corrupt a batch for masked-LM training.
///
/// Returns the corrupted ids and, for every corrupted position, its row index
/// and original id. At least one real token is always selected.
pub(crate) fn mlm_mask_batch(
    token_ids: &[u32],
    attention_mask: &[bool],
    masking: &super::MlmMasking,
    vocab_size: usize,
    rng: &mut Rng,
) -> (Vec<u32>, Vec<usize>, Vec<i32>) {
    use crate::data::Vocabulary;
    let first_regular = crate::data::SPECIAL_TOKENS.len() as u32;
    let mut rows: Vec<usize> = (0..token_ids.len())
        .filter(|&i| attention_mask[i] && rng.bernoulli(masking.rate))
        .collect();
    if rows.is_empty() {
        let real: Vec<usize> = (0..token_ids.len())
            .filter(|&i| attention_mask[i])
            .collect();
        if !real.is_empty() {
            rows.push(real[rng.below(real.len())]);
        }
    }
    let mut ids = token_ids.to_vec();
    let mut targets = Vec::with_capacity(rows.len());
    for &i in &rows {
        targets.push(token_ids[i] as i32);
        let r = rng.uniform();
        if r < masking.mask_prob {
            ids[i] = Vocabulary::MASK;
        } else if r < masking.mask_prob + masking.random_prob && vocab_size as u32 > first_regular {
            ids[i] = first_regular + rng.below(vocab_size - first_regular as usize) as u32;
        }
    }
    (ids, rows, targets)
}

fn to_3d(t: Tensor, inputs: &Inputs<'_>) -> Result<Tensor> {
    let c = t.last_dim();
    t.reshape(&[inputs.batch, inputs.seq, c])
}

impl EncoderModel {
    /// Per-token class logits `[batch, seq, num_classes]`, dropout off.
    pub fn forward(&self, inputs: &Inputs<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut backend = BoundParams::new(self, false);
        let (hidden, _) = encode(&mut backend, &mut tape, inputs, &mut None)?;
        let logits = classify(&mut backend, &mut tape, hidden)?;
        to_3d(tape.value(logits).clone(), inputs)
    }

    /// Final hidden states `[batch·seq × hidden]`.
    pub fn hidden_states(&self, inputs: &Inputs<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut backend = BoundParams::new(self, false);
        let (hidden, _) = encode(&mut backend, &mut tape, inputs, &mut None)?;
        Ok(tape.value(hidden).clone())
    }

    /// Normalized input embeddings `[batch·seq × hidden]`.
    pub fn embed_tokens(&self, inputs: &Inputs<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut backend = BoundParams::new(self, false);
        let x = embed(&mut backend, &mut tape, inputs, &mut None)?;
        Ok(tape.value(x).clone())
    }

    /// Apply encoder block `layer` to hidden states `[batch·seq × hidden]`.
    pub fn apply_layer(
        &self,
        layer: usize,
        hidden: &Tensor,
        inputs: &Inputs<'_>,
    ) -> Result<Tensor> {
        if layer >= self.config().num_layers {
            return Err(Error::Parameter(format!(
                "layer {layer} out of range for {} layers",
                self.config().num_layers
            )));
        }
        inputs.check(self.config())?;
        let mut tape = Tape::new();
        let mut backend = BoundParams::new(self, false);
        let x = tape.constant(hidden.clone());
        let (out, _) = encoder_layer(&mut backend, &mut tape, layer, x, inputs, &mut None)?;
        Ok(tape.value(out).clone())
    }

    /// Classifier applied to hidden states `[rows × hidden]`.
    pub fn classify_hidden(&self, hidden: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut backend = BoundParams::new(self, false);
        let x = tape.constant(hidden.clone());
        let logits = classify(&mut backend, &mut tape, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Attention probabilities per layer, each `[batch, heads, seq, seq]`.
    pub fn attention_probabilities(&self, inputs: &Inputs<'_>) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new();
        let mut backend = BoundParams::new(self, false);
        let (_, attention) = encode(&mut backend, &mut tape, inputs, &mut None)?;
        Ok(attention
            .iter()
            .map(|a| {
                tape.attention_probs(*a)
                    .map(|p| p.to_vec())
                    .unwrap_or_default()
            })
            .collect())
    }

    /// Masked-LM logits `[rows.len() × vocab]` at the given flat positions.
    pub fn mlm_logits(&self, inputs: &Inputs<'_>, rows: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut backend = BoundParams::new(self, false);
        let (hidden, _) = encode(&mut backend, &mut tape, inputs, &mut None)?;
        let logits = mlm_logits(&mut backend, &mut tape, hidden, rows)?;
        Ok(tape.value(logits).clone())
    }
}

impl TokenClassifier for EncoderModel {
    fn config(&self) -> &EncoderConfig {
        EncoderModel::config(self)
    }

    fn logits(&self, inputs: &Inputs<'_>) -> Result<Tensor> {
        self.forward(inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocabulary;

    fn tiny(layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            num_heads: 2,
            hidden_size: 16,
            ffn_size: 32,
            vocab_size: 50,
            max_positions: 16,
            num_classes: 5,
            dropout: 0.0,
        }
    }

    fn random_ids(rng: &mut Rng, n: usize, vocab: usize) -> Vec<u32> {
        (0..n).map(|_| rng.below(vocab) as u32).collect()
    }

    #[test]
    fn output_shape() {
        let m = EncoderModel::init(tiny(2), 1).unwrap();
        let mut rng = Rng::seed(5);
        let ids = random_ids(&mut rng, 3 * 7, 50);
        let mask = vec![true; 21];
        let out = m
            .forward(&Inputs {
                token_ids: &ids,
                attention_mask: &mask,
                batch: 3,
                seq: 7,
            })
            .unwrap();
        assert_eq!(out.shape(), &[3, 7, 5]);
        assert!(out.is_finite());
    }

    #[test]
    fn out_of_range_id_names_position() {
        let m = EncoderModel::init(tiny(1), 1).unwrap();
        let ids = [1, 2, 99, 3];
        let mask = [true; 4];
        let err = m
            .forward(&Inputs {
                token_ids: &ids,
                attention_mask: &mask,
                batch: 1,
                seq: 4,
            })
            .unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains("position 2"), "{msg}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let m = EncoderModel::init(tiny(1), 1).unwrap();
        let ids = vec![4u32; 17];
        let mask = vec![true; 17];
        assert!(m
            .forward(&Inputs {
                token_ids: &ids,
                attention_mask: &mask,
                batch: 1,
                seq: 17
            })
            .is_err());
    }

    #[test]
    fn padding_tail_does_not_leak_into_real_tokens() {
        let m = EncoderModel::init(tiny(1), 2).unwrap();
        let mut rng = Rng::seed(9);
        let real = 5;
        let seq = 9;
        let mut ids = random_ids(&mut rng, seq, 50);
        let mask: Vec<bool> = (0..seq).map(|i| i < real).collect();
        let run = |ids: &[u32]| {
            m.forward(&Inputs {
                token_ids: ids,
                attention_mask: &mask,
                batch: 1,
                seq,
            })
            .unwrap()
        };
        let before = run(&ids);
        ids[real..].reverse();
        ids[seq - 1] = Vocabulary::PAD;
        let after = run(&ids);
        let c = 5;
        assert_eq!(before.data()[..real * c], after.data()[..real * c]);
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let m = EncoderModel::init(tiny(2), 3).unwrap();
        let mut rng = Rng::seed(1);
        let row = random_ids(&mut rng, 6, 50);
        let ids: Vec<u32> = row.iter().chain(&row).copied().collect();
        let mask = vec![true; 12];
        let out = m
            .forward(&Inputs {
                token_ids: &ids,
                attention_mask: &mask,
                batch: 2,
                seq: 6,
            })
            .unwrap();
        assert_eq!(out.data()[..30], out.data()[30..]);
    }

    #[test]
    fn layers_compose() {
        let m = EncoderModel::init(tiny(3), 4).unwrap();
        let mut rng = Rng::seed(2);
        let ids = random_ids(&mut rng, 2 * 5, 50);
        let mask = [true, true, true, false, false, true, true, true, true, true];
        let inputs = Inputs {
            token_ids: &ids,
            attention_mask: &mask,
            batch: 2,
            seq: 5,
        };
        let mut h = m.embed_tokens(&inputs).unwrap();
        for l in 0..3 {
            h = m.apply_layer(l, &h, &inputs).unwrap();
        }
        let composed = m.classify_hidden(&h).unwrap();
        assert_eq!(composed.data(), m.forward(&inputs).unwrap().data());
    }

    #[test]
    fn attention_rows_sum_to_one_over_real_keys() {
        let m = EncoderModel::init(tiny(2), 6).unwrap();
        let mut rng = Rng::seed(3);
        let (b, s) = (2, 6);
        let ids = random_ids(&mut rng, b * s, 50);
        let mask: Vec<bool> = (0..b * s).map(|i| i % s < 4 + i / s).collect();
        let probs = m
            .attention_probabilities(&Inputs {
                token_ids: &ids,
                attention_mask: &mask,
                batch: b,
                seq: s,
            })
            .unwrap();
        assert_eq!(probs.len(), 2);
        for layer in &probs {
            for (r, row) in layer.chunks(s).enumerate() {
                let batch = r / (2 * s);
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5);
                for (j, p) in row.iter().enumerate() {
                    if !mask[batch * s + j] {
                        assert_eq!(*p, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn mlm_masking_picks_only_real_tokens() {
        let masking = super::super::MlmMasking::default();
        let mut rng = Rng::seed(0);
        let ids: Vec<u32> = (4..24).collect();
        let mask: Vec<bool> = (0..20).map(|i| i < 3).collect();
        for _ in 0..50 {
            let (corrupted, rows, targets) = mlm_mask_batch(&ids, &mask, &masking, 50, &mut rng);
            assert!(!rows.is_empty());
            for (r, t) in rows.iter().zip(&targets) {
                assert!(*r < 3);
                assert_eq!(*t, ids[*r] as i32);
            }
            assert_eq!(corrupted[3..], ids[3..]);
        }
    }
}
