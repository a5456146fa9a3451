//! Corpus and NER data handling: BIO tags, CoNLL text, corpus filtering,
//! vocabulary, the synthetic corpus generator and batching.

mod batch;
mod conll;
mod preprocess;
mod synth;
mod tags;
mod vocab;

pub use batch::{batch, batch_examples, encode_sentences, Example, TokenizedBatch, IGNORE_INDEX};
pub use conll::{parse_conll, write_conll, ConllCorpus};
pub use preprocess::{keep_line, preprocess_corpus, MIN_TOKENS_EXCLUSIVE};
pub use synth::{
    synth_ner_corpus, synth_ner_corpus_with, synth_text_corpus, SynthConfig, SynthSplits,
};
pub use tags::{
    check_tag, validate_scheme, SchemeIssue, Sentence, Tag, TagSet, DEFAULT_ENTITY_TYPES,
};
pub use vocab::{
    build_vocab, Vocabulary, BOS_TOKEN, MASK_TOKEN, PAD_TOKEN, SPECIAL_TOKENS, UNK_TOKEN,
};
