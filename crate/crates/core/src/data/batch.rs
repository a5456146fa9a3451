use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tags::{Sentence, TagSet};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Inputs;
use crate::rng::Rng;

/// Label id marking positions excluded from losses and metrics.
pub const IGNORE_INDEX: i32 = -100;

/// A sentence mapped to ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub token_ids: Vec<u32>,
    pub label_ids: Vec<i32>,
}

/// Padded `[batch × seq]` id matrix with mask and aligned labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedBatch {
    pub batch: usize,
    pub seq: usize,
    pub token_ids: Vec<u32>,
    /// True exactly on real (non-padding) tokens.
    pub attention_mask: Vec<bool>,
    pub label_ids: Vec<i32>,
}

impl TokenizedBatch {
    pub fn inputs(&self) -> Inputs<'_> {
        Inputs {
            token_ids: &self.token_ids,
            attention_mask: &self.attention_mask,
            batch: self.batch,
            seq: self.seq,
        }
    }

    pub fn real_tokens(&self) -> usize {
        self.attention_mask.iter().filter(|m| **m).count()
    }

    /// Real length of each row.
    pub fn lengths(&self) -> Vec<usize> {
        self.attention_mask
            .chunks(self.seq)
            .map(|r| r.iter().filter(|m| **m).count())
            .collect()
    }
}

pub fn encode_sentences(
    sentences: &[Sentence],
    vocab: &Vocabulary,
    tagset: &TagSet,
) -> Result<Vec<Example>> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let label_ids = s
                .tags
                .iter()
                .map(|t| {
                    tagset.id(t).map(|id| id as i32).ok_or_else(|| {
                        Error::Data(format!("sentence {i}: tag {t:?} not in tag set"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Example {
                token_ids: vocab.encode(s.tokens.iter().map(|t| t.as_str())),
                label_ids,
            })
        })
        .collect()
}

/// Truncate, pad and group examples into batches of `batch_size` (last one ragged).
///
/// With a shuffle seed the example order is permuted first. Each batch is
/// padded to its longest (truncated) member.
pub fn batch_examples(
    examples: &[Example],
    max_seq_len: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<TokenizedBatch>> {
    if max_seq_len < 2 {
        return Err(Error::Parameter(format!(
            "max_seq_len must be at least 2, got {max_seq_len}"
        )));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::seed(seed).shuffle(&mut order);
    }
    let mut out = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut seq = 0;
        for &i in chunk {
            let ex = &examples[i];
            if ex.token_ids.is_empty() || ex.token_ids.len() != ex.label_ids.len() {
                return Err(Error::Data(format!(
                    "example {i} is empty or has misaligned labels"
                )));
            }
            seq = seq.max(ex.token_ids.len().min(max_seq_len));
        }
        let b = chunk.len();
        let mut token_ids = vec![Vocabulary::PAD; b * seq];
        let mut attention_mask = vec![false; b * seq];
        let mut label_ids = vec![IGNORE_INDEX; b * seq];
        for (row, &i) in chunk.iter().enumerate() {
            let ex = &examples[i];
            let n = ex.token_ids.len().min(seq);
            let base = row * seq;
            token_ids[base..base + n].copy_from_slice(&ex.token_ids[..n]);
            label_ids[base..base + n].copy_from_slice(&ex.label_ids[..n]);
            attention_mask[base..base + n].fill(true);
        }
        out.push(TokenizedBatch {
            batch: b,
            seq,
            token_ids,
            attention_mask,
            label_ids,
        });
    }
    Ok(out)
}

pub fn batch(
    sentences: &[Sentence],
    vocab: &Vocabulary,
    tagset: &TagSet,
    max_seq_len: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<TokenizedBatch>> {
    let examples = encode_sentences(sentences, vocab, tagset)?;
    batch_examples(&examples, max_seq_len, batch_size, shuffle_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, synth_ner_corpus, DEFAULT_ENTITY_TYPES};
    use alloc::collections::BTreeMap;
    use proptest::prelude::*;

    fn corpus(n: usize) -> (Vec<Sentence>, Vocabulary, TagSet) {
        let s = synth_ner_corpus(4, n, &DEFAULT_ENTITY_TYPES).unwrap();
        let v = build_vocab(
            s.train
                .iter()
                .flat_map(|s| s.tokens.iter().map(|t| t.as_str())),
            2000,
        )
        .unwrap();
        (s.train, v, TagSet::new(&DEFAULT_ENTITY_TYPES))
    }

    #[test]
    fn short_sentences_mask_counts_equal_lengths() {
        let (sents, v, ts) = corpus(40);
        let batches = batch(&sents, &v, &ts, 164, 16, None).unwrap();
        let lengths: Vec<usize> = batches.iter().flat_map(|b| b.lengths()).collect();
        let expect: Vec<usize> = sents.iter().map(|s| s.len()).collect();
        assert_eq!(lengths, expect);
    }

    #[test]
    fn long_sentences_truncate_in_lockstep() {
        let (sents, v, ts) = corpus(40);
        let long = sents.iter().find(|s| s.len() > 6).unwrap().clone();
        let b = &batch(core::slice::from_ref(&long), &v, &ts, 5, 16, None).unwrap()[0];
        assert_eq!(b.seq, 5);
        for i in 0..5 {
            assert_eq!(b.token_ids[i], v.id(&long.tokens[i]));
            assert_eq!(b.label_ids[i], ts.id(&long.tags[i]).unwrap() as i32);
        }
        assert!(b.attention_mask.iter().all(|m| *m));
    }

    #[test]
    fn full_batches_then_ragged_remainder() {
        let (sents, v, ts) = corpus(50);
        assert_eq!(sents.len(), 35);
        let batches = batch(&sents, &v, &ts, 164, 16, Some(9)).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.batch).collect();
        assert_eq!(sizes, [16, 16, 3]);
    }

    #[test]
    fn padding_is_ignored_and_unmasked() {
        let (sents, v, ts) = corpus(40);
        for b in batch(&sents, &v, &ts, 164, 4, None).unwrap() {
            for i in 0..b.token_ids.len() {
                if !b.attention_mask[i] {
                    assert_eq!(b.label_ids[i], IGNORE_INDEX);
                    assert_eq!(b.token_ids[i], Vocabulary::PAD);
                }
            }
        }
    }

    #[test]
    fn rejects_tiny_max_len() {
        let (sents, v, ts) = corpus(20);
        assert!(batch(&sents, &v, &ts, 1, 4, None).is_err());
    }

    proptest! {
        #[test]
        fn batching_preserves_token_tag_pairs(seed in 0u64..1000, max_len in 2usize..30, bs in 1usize..9) {
            let (sents, v, ts) = corpus(30);
            let batches = batch(&sents, &v, &ts, max_len, bs, Some(seed)).unwrap();
            let mut expect: BTreeMap<(u32, i32), usize> = BTreeMap::new();
            for s in &sents {
                for (tok, tag) in s.tokens.iter().zip(&s.tags).take(max_len) {
                    *expect.entry((v.id(tok), ts.id(tag).unwrap() as i32)).or_default() += 1;
                }
            }
            let mut got: BTreeMap<(u32, i32), usize> = BTreeMap::new();
            for b in &batches {
                prop_assert!(b.seq <= max_len);
                for i in 0..b.token_ids.len() {
                    if b.attention_mask[i] {
                        *got.entry((b.token_ids[i], b.label_ids[i])).or_default() += 1;
                    }
                }
            }
            prop_assert_eq!(got, expect);
        }
    }
}
