//! Template-generated NER corpus for desk-scale experiments.
//!
//! Every entity type draws its surface words from its own disjoint pool and is
//! often preceded by a type-specific trigger word, so the task is learnable by
//! a small encoder; B/I decisions still need left context.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::tags::Sentence;
use crate::error::{Error, Result};
use crate::rng::Rng;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const FILLER_WORDS: usize = 240;
const ENTITY_WORDS: usize = 50;
const TRIGGER_WORDS: usize = 3;
const WORD_SPACE: usize = 4900;

/// Knobs for [`synth_ner_corpus_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_sentences: usize,
    pub entity_types: Vec<String>,
    /// Relative frequency of each entity type among mentions.
    pub mixture: Vec<f32>,
    /// Probability that an entity mention is preceded by its trigger word.
    pub trigger_rate: f32,
}

impl SynthConfig {
    pub fn uniform(n_sentences: usize, entity_types: &[&str]) -> Self {
        Self {
            n_sentences,
            entity_types: entity_types.iter().map(|s| s.to_string()).collect(),
            mixture: alloc::vec![1.0; entity_types.len()],
            trigger_rate: 0.6,
        }
    }
}

/// Train/dev/test split of a synthetic corpus (70/10/20).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplits {
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

pub fn synth_ner_corpus(
    seed: u64,
    n_sentences: usize,
    entity_types: &[&str],
) -> Result<SynthSplits> {
    synth_ner_corpus_with(seed, &SynthConfig::uniform(n_sentences, entity_types))
}

pub fn synth_ner_corpus_with(seed: u64, config: &SynthConfig) -> Result<SynthSplits> {
    if config.n_sentences < 10 {
        return Err(Error::Parameter(format!(
            "need at least 10 sentences, got {}",
            config.n_sentences
        )));
    }
    if config.entity_types.is_empty() || config.mixture.len() != config.entity_types.len() {
        return Err(Error::Parameter(
            "entity types and mixture weights must be non-empty and aligned".into(),
        ));
    }
    if config.mixture.iter().any(|w| !(*w >= 0.0)) || config.mixture.iter().sum::<f32>() <= 0.0 {
        return Err(Error::Parameter(
            "mixture weights must be non-negative".into(),
        ));
    }
    let lex = Lexicon::new(config.entity_types.len())?;
    let mut rng = Rng::seed(seed);
    let mut all: Vec<Sentence> = (0..config.n_sentences)
        .map(|_| generate_sentence(&mut rng, &lex, config))
        .collect();
    let n = config.n_sentences;
    let n_train = n * 7 / 10;
    let n_dev = n / 10;
    let test = all.split_off(n_train + n_dev);
    let dev = all.split_off(n_train);
    Ok(SynthSplits {
        train: all,
        dev,
        test,
    })
}

/// Unlabeled pretraining text in the same lexical space as the NER corpus.
///
/// About one line in ten is deliberately short or punctuation-only so the
/// corpus filters have something to remove.
pub fn synth_text_corpus(seed: u64, n_lines: usize, entity_types: &[&str]) -> Result<Vec<String>> {
    let config = SynthConfig::uniform(10, entity_types);
    let lex = Lexicon::new(entity_types.len())?;
    let mut rng = Rng::seed(seed ^ 0x7e47_c0a9);
    let mut lines = Vec::with_capacity(n_lines);
    for _ in 0..n_lines {
        let r = rng.uniform();
        let line = if r < 0.05 {
            "... !! ?? -- ;;".to_string()
        } else if r < 0.1 {
            generate_sentence(&mut rng, &lex, &config).tokens[..3].join(" ")
        } else {
            let mut toks = generate_sentence(&mut rng, &lex, &config).tokens;
            while toks.len() <= 12 {
                toks.extend(generate_sentence(&mut rng, &lex, &config).tokens);
            }
            toks.join(" ")
        };
        lines.push(line);
    }
    Ok(lines)
}

struct Lexicon {
    filler: Vec<String>,
    entities: Vec<Vec<String>>,
    triggers: Vec<Vec<String>>,
}

impl Lexicon {
    fn new(n_types: usize) -> Result<Self> {
        let needed = FILLER_WORDS + n_types * (ENTITY_WORDS + TRIGGER_WORDS);
        if needed > WORD_SPACE {
            return Err(Error::Parameter(format!(
                "too many entity types ({n_types})"
            )));
        }
        let mut next = 0usize;
        let mut take = |n: usize| -> Vec<String> {
            let out = (next..next + n).map(word).collect();
            next += n;
            out
        };
        let filler = take(FILLER_WORDS);
        let mut entities = Vec::new();
        let mut triggers = Vec::new();
        for _ in 0..n_types {
            entities.push(take(ENTITY_WORDS));
            triggers.push(take(TRIGGER_WORDS));
        }
        Ok(Self {
            filler,
            entities,
            triggers,
        })
    }
}

fn syllable(i: usize) -> [u8; 2] {
    [CONSONANTS[i / VOWELS.len()], VOWELS[i % VOWELS.len()]]
}

/// Deterministic pronounceable two-syllable word; distinct for `i < 4900`.
fn word(i: usize) -> String {
    let n_syl = CONSONANTS.len() * VOWELS.len();
    let j = (i * 2311 + 17) % WORD_SPACE;
    let (a, b) = (syllable(j / n_syl), syllable(j % n_syl));
    String::from_utf8([a[0], a[1], b[0], b[1]].to_vec()).unwrap()
}

fn generate_sentence(rng: &mut Rng, lex: &Lexicon, config: &SynthConfig) -> Sentence {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let push_filler =
        |rng: &mut Rng, tokens: &mut Vec<String>, tags: &mut Vec<String>, n: usize| {
            for _ in 0..n {
                tokens.push(lex.filler[rng.below(lex.filler.len())].clone());
                tags.push("O".to_string());
            }
        };
    let lead = rng.below(3);
    push_filler(rng, &mut tokens, &mut tags, lead);
    let n_entities = 1 + rng.below(3);
    for _ in 0..n_entities {
        let ty = rng.weighted_index(&config.mixture);
        let name = &config.entity_types[ty];
        if rng.bernoulli(config.trigger_rate) {
            let pool = &lex.triggers[ty];
            tokens.push(pool[rng.below(pool.len())].clone());
            tags.push("O".to_string());
        }
        let len = 1 + rng.below(3);
        let pool = &lex.entities[ty];
        for k in 0..len {
            tokens.push(pool[rng.below(pool.len())].clone());
            tags.push(if k == 0 {
                format!("B-{name}")
            } else {
                format!("I-{name}")
            });
        }
        let gap = 1 + rng.below(4);
        push_filler(rng, &mut tokens, &mut tags, gap);
    }
    Sentence { tokens, tags }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tags::{check_tag, validate_scheme, Tag};
    use crate::data::DEFAULT_ENTITY_TYPES;
    use alloc::collections::BTreeSet;
    use alloc::vec;

    #[test]
    fn words_are_unique() {
        let set: BTreeSet<String> = (0..WORD_SPACE).map(word).collect();
        assert_eq!(set.len(), WORD_SPACE);
    }

    #[test]
    fn tags_are_valid_bio() {
        let s = synth_ner_corpus(3, 500, &DEFAULT_ENTITY_TYPES).unwrap();
        for split in [&s.train, &s.dev, &s.test] {
            assert!(validate_scheme(split).is_empty());
            for sent in split.iter() {
                for t in &sent.tags {
                    check_tag(t, &DEFAULT_ENTITY_TYPES).unwrap();
                }
            }
        }
    }

    #[test]
    fn split_ratios() {
        let s = synth_ner_corpus(1, 105, &DEFAULT_ENTITY_TYPES).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (73, 10, 22));
        assert!(synth_ner_corpus(1, 9, &DEFAULT_ENTITY_TYPES).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_ner_corpus(11, 50, &DEFAULT_ENTITY_TYPES).unwrap();
        let b = synth_ner_corpus(11, 50, &DEFAULT_ENTITY_TYPES).unwrap();
        let c = synth_ner_corpus(12, 50, &DEFAULT_ENTITY_TYPES).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn entity_pools_are_disjoint() {
        let lex = Lexicon::new(4).unwrap();
        let mut seen = BTreeSet::new();
        for w in lex
            .filler
            .iter()
            .chain(lex.entities.iter().flatten())
            .chain(lex.triggers.iter().flatten())
        {
            assert!(seen.insert(w.clone()));
        }
    }

    fn type_rates(seed: u64, config: &SynthConfig) -> Vec<f32> {
        let s = synth_ner_corpus_with(seed, config).unwrap();
        let mut counts = vec![0usize; config.entity_types.len()];
        for sent in s.train.iter().chain(&s.dev).chain(&s.test) {
            for t in &sent.tags {
                if let Ok(Tag::Begin(ty)) = Tag::parse(t) {
                    counts[config.entity_types.iter().position(|e| e == ty).unwrap()] += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        counts.iter().map(|c| *c as f32 / total as f32).collect()
    }

    #[test]
    fn entity_base_rate_follows_mixture() {
        let mut config = SynthConfig::uniform(2000, &DEFAULT_ENTITY_TYPES);
        config.mixture = vec![0.4, 0.1, 0.3, 0.2];
        for seed in [1, 3, 5] {
            let rates = type_rates(seed, &config);
            for (r, w) in rates.iter().zip(&config.mixture) {
                assert!((r - w).abs() <= 0.1 * w, "seed {seed}: rate {r} vs {w}");
            }
        }
    }

    #[test]
    fn text_corpus_has_filterable_lines() {
        let lines = synth_text_corpus(2, 200, &DEFAULT_ENTITY_TYPES).unwrap();
        let kept = crate::data::preprocess_corpus(lines.iter().map(|s| s.as_str()));
        assert!(kept.len() < lines.len());
        assert!(kept.len() > lines.len() / 2);
    }
}
