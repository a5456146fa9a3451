//! Entity-level span scoring and model evaluation over tagged sentences.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::{batch, Sentence, Tag, TagSet, Vocabulary, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::TokenClassifier;
use crate::tensor::kernels;

/// A typed entity mention covering tokens `start..=end`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntitySpan {
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

/// Maximal entity spans of a BIO sequence.
///
/// An `I-X` that does not continue an `X` span opens a new one, as conlleval does.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = Tag::parse(tag.as_ref())?;
        let continues = matches!((&tag, open), (Tag::Inside(ty), Some((cur, _))) if *ty == cur);
        if continues {
            continue;
        }
        if let Some((ty, start)) = open.take() {
            spans.push(EntitySpan {
                entity_type: ty.to_string(),
                start,
                end: i - 1,
            });
        }
        if let Tag::Begin(ty) | Tag::Inside(ty) = tag {
            open = Some((ty, i));
        }
    }
    if let Some((ty, start)) = open {
        spans.push(EntitySpan {
            entity_type: ty.to_string(),
            start,
            end: tags.len() - 1,
        });
    }
    Ok(spans)
}

/// Micro-averaged span counts and scores.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpanScores {
    pub precision: f32,
    pub recall: f32,
    pub f1: f32,
    pub gold_spans: usize,
    pub predicted_spans: usize,
    pub correct_spans: usize,
}

impl SpanScores {
    pub fn from_counts(gold_spans: usize, predicted_spans: usize, correct_spans: usize) -> Self {
        let ratio = |a: usize, b: usize| {
            if b == 0 {
                0.0
            } else {
                (a as f64 / b as f64) as f32
            }
        };
        let precision = ratio(correct_spans, predicted_spans);
        let recall = ratio(correct_spans, gold_spans);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            gold_spans,
            predicted_spans,
            correct_spans,
        }
    }
}

/// Exact-match (type, start, end) precision, recall and F1 over a corpus.
pub fn span_prf<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<SpanScores> {
    if gold.len() != pred.len() {
        return Err(Error::Data(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let (mut n_gold, mut n_pred, mut n_correct) = (0, 0, 0);
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Data(format!(
                "sentence {i}: {} gold tags but {} predicted",
                g.len(),
                p.len()
            )));
        }
        let gs = extract_spans(g)?;
        let ps = extract_spans(p)?;
        n_gold += gs.len();
        n_pred += ps.len();
        n_correct += ps.iter().filter(|s| gs.contains(s)).count();
    }
    Ok(SpanScores::from_counts(n_gold, n_pred, n_correct))
}

/// Loss and span scores of a model on a tagged dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean token cross-entropy over real tokens.
    pub loss: f32,
    pub scores: SpanScores,
    pub predicted_tags: Vec<Vec<String>>,
}

/// Argmax-decode every real token and score the predicted spans.
pub fn evaluate_tags(
    model: &dyn TokenClassifier,
    sentences: &[Sentence],
    vocab: &Vocabulary,
    tagset: &TagSet,
    max_seq_len: usize,
    batch_size: usize,
) -> Result<Evaluation> {
    if sentences.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if model.config().num_classes != tagset.len() {
        return Err(Error::Data(format!(
            "model predicts {} classes but the tag set has {}",
            model.config().num_classes,
            tagset.len()
        )));
    }
    let batches = batch(sentences, vocab, tagset, max_seq_len, batch_size, None)?;
    let c = tagset.len();
    let mut predicted_tags: Vec<Vec<String>> = Vec::with_capacity(sentences.len());
    let mut loss_sum = 0.0f64;
    let mut loss_count = 0usize;
    let mut logp = alloc::vec![0.0f32; c];
    let mut sent = 0usize;
    for b in &batches {
        let logits = model.logits(&b.inputs())?;
        for row in 0..b.batch {
            let full_len = sentences[sent].len();
            let mut tags = Vec::with_capacity(full_len);
            for pos in 0..b.seq {
                let i = row * b.seq + pos;
                if !b.attention_mask[i] {
                    continue;
                }
                let scores = &logits.data()[i * c..(i + 1) * c];
                tags.push(tagset.label(kernels::argmax(scores)).to_string());
                if b.label_ids[i] != IGNORE_INDEX {
                    kernels::log_softmax_row(scores, &mut logp);
                    loss_sum -= logp[b.label_ids[i] as usize] as f64;
                    loss_count += 1;
                }
            }
            // tokens cut by truncation are predicted as outside
            tags.resize(full_len, "O".to_string());
            predicted_tags.push(tags);
            sent += 1;
        }
    }
    let gold: Vec<Vec<String>> = sentences.iter().map(|s| s.tags.clone()).collect();
    let scores = span_prf(&gold, &predicted_tags)?;
    Ok(Evaluation {
        loss: if loss_count == 0 {
            0.0
        } else {
            (loss_sum / loss_count as f64) as f32
        },
        scores,
        predicted_tags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::collections::BTreeSet;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn span(ty: &str, start: usize, end: usize) -> EntitySpan {
        EntitySpan {
            entity_type: ty.to_string(),
            start,
            end,
        }
    }

    #[test]
    fn manual_enumeration() {
        let spans = extract_spans(&["B-PER", "I-PER", "O", "B-LOC"]).unwrap();
        assert_eq!(spans, [span("PER", 0, 1), span("LOC", 3, 3)]);
        assert!(extract_spans(&["O", "O"]).unwrap().is_empty());
        assert_eq!(extract_spans(&["I-PER"]).unwrap(), [span("PER", 0, 0)]);
        assert_eq!(
            extract_spans(&["B-PER", "I-LOC", "I-LOC", "B-LOC", "B-LOC"]).unwrap(),
            [
                span("PER", 0, 0),
                span("LOC", 1, 2),
                span("LOC", 3, 3),
                span("LOC", 4, 4)
            ]
        );
        assert!(matches!(extract_spans(&["X-PER"]), Err(Error::Data(_))));
    }

    #[test]
    fn hand_scored_example() {
        let gold = vec![vec!["B-PER", "I-PER", "O", "B-LOC", "O"]];
        let pred = vec![vec!["B-PER", "I-PER", "O", "O", "B-LOC"]];
        let s = span_prf(&gold, &pred).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn degenerate_cases() {
        let gold = vec![vec!["B-PER", "O"]];
        let s = span_prf(&gold, &gold).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = span_prf(&gold, &[vec!["O", "O"]]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        match span_prf(&[vec!["O"], vec!["O", "O"]], &[vec!["O"], vec!["O"]]) {
            Err(Error::Data(msg)) => assert!(msg.contains("sentence 1")),
            other => panic!("{other:?}"),
        }
    }

    const TAGS: [&str; 7] = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG"];

    fn random_tags(rng: &mut Rng, len: usize) -> Vec<&'static str> {
        (0..len).map(|_| TAGS[rng.below(TAGS.len())]).collect()
    }

    /// Brute force: test every (start, end) window for being a maximal span.
    fn oracle_spans(tags: &[&str]) -> BTreeSet<(String, usize, usize)> {
        let ty = |t: &str| t.split_once('-').map(|(_, y)| y.to_string());
        let starts = |i: usize| -> bool {
            let t = tags[i];
            if t.starts_with("B-") {
                return true;
            }
            if t.starts_with("I-") {
                return i == 0 || ty(tags[i - 1]) != ty(t);
            }
            false
        };
        let mut out = BTreeSet::new();
        for s in 0..tags.len() {
            if !starts(s) {
                continue;
            }
            for e in s..tags.len() {
                let inner_ok =
                    (s + 1..=e).all(|j| tags[j].starts_with("I-") && ty(tags[j]) == ty(tags[s]));
                let closed = e + 1 == tags.len()
                    || !(tags[e + 1].starts_with("I-") && ty(tags[e + 1]) == ty(tags[s]));
                if inner_ok && closed {
                    out.insert((ty(tags[s]).unwrap(), s, e));
                }
            }
        }
        out
    }

    fn oracle_prf(gold: &[Vec<&str>], pred: &[Vec<&str>]) -> (f64, f64, f64) {
        let (mut ng, mut np, mut nc) = (0usize, 0usize, 0usize);
        for (g, p) in gold.iter().zip(pred) {
            let gs = oracle_spans(g);
            let ps = oracle_spans(p);
            ng += gs.len();
            np += ps.len();
            nc += gs.intersection(&ps).count();
        }
        let p = if np == 0 { 0.0 } else { nc as f64 / np as f64 };
        let r = if ng == 0 { 0.0 } else { nc as f64 / ng as f64 };
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        (p, r, f)
    }

    fn random_corpus(rng: &mut Rng) -> (Vec<Vec<&'static str>>, Vec<Vec<&'static str>>) {
        let n = 1 + rng.below(8);
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..n {
            let len = 1 + rng.below(12);
            let g = random_tags(rng, len);
            // predictions: mostly copy gold, sometimes corrupt
            let p = g
                .iter()
                .map(|t| {
                    if rng.bernoulli(0.3) {
                        TAGS[rng.below(TAGS.len())]
                    } else {
                        *t
                    }
                })
                .collect();
            gold.push(g);
            pred.push(p);
        }
        (gold, pred)
    }

    #[test]
    fn matches_brute_force_oracle() {
        for seed in 0..100 {
            let mut rng = Rng::seed(seed);
            let (gold, pred) = random_corpus(&mut rng);
            let s = span_prf(&gold, &pred).unwrap();
            let (p, r, f) = oracle_prf(&gold, &pred);
            assert!((s.precision as f64 - p).abs() < 1e-6, "seed {seed}");
            assert!((s.recall as f64 - r).abs() < 1e-6, "seed {seed}");
            assert!((s.f1 as f64 - f).abs() < 1e-6, "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn spans_match_oracle(seed in 0u64..100_000, len in 1usize..20) {
            let mut rng = Rng::seed(seed);
            let tags = random_tags(&mut rng, len);
            let got: BTreeSet<(String, usize, usize)> = extract_spans(&tags)
                .unwrap()
                .into_iter()
                .map(|s| (s.entity_type, s.start, s.end))
                .collect();
            prop_assert_eq!(got, oracle_spans(&tags));
        }

        #[test]
        fn duplication_and_order_leave_scores_unchanged(seed in 0u64..100_000) {
            let mut rng = Rng::seed(seed);
            let (gold, pred) = random_corpus(&mut rng);
            let base = span_prf(&gold, &pred).unwrap();
            let doubled_g: Vec<_> = gold.iter().chain(&gold).cloned().collect();
            let doubled_p: Vec<_> = pred.iter().chain(&pred).cloned().collect();
            let doubled = span_prf(&doubled_g, &doubled_p).unwrap();
            prop_assert!((base.f1 - doubled.f1).abs() < 1e-6);
            prop_assert!((base.precision - doubled.precision).abs() < 1e-6);
            let mut order: Vec<usize> = (0..gold.len()).collect();
            rng.shuffle(&mut order);
            let pg: Vec<_> = order.iter().map(|i| gold[*i].clone()).collect();
            let pp: Vec<_> = order.iter().map(|i| pred[*i].clone()).collect();
            let permuted = span_prf(&pg, &pp).unwrap();
            prop_assert!((base.f1 - permuted.f1).abs() < 1e-6);
            let f = base.f1;
            let (p, r) = (base.precision, base.recall);
            if p + r > 0.0 {
                prop_assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-6);
            } else {
                prop_assert_eq!(f, 0.0);
            }
        }
    }
}
