//! CoNLL-style `token tag` text, one token per line, blank line between sentences.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::tags::{check_tag, validate_scheme, SchemeIssue, Sentence};
use crate::error::{Error, Result};

/// Parsed sentences plus BIO continuity warnings (with source line numbers).
#[derive(Debug, Clone, PartialEq)]
pub struct ConllCorpus {
    pub sentences: Vec<Sentence>,
    pub issues: Vec<SchemeIssue>,
}

pub fn parse_conll(text: &str, entity_types: &[&str]) -> Result<ConllCorpus> {
    let mut sentences = Vec::new();
    let mut lines_of = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                sentences.push(Sentence::new(
                    core::mem::take(&mut tokens),
                    core::mem::take(&mut tags),
                )?);
                lines_of.push(core::mem::take(&mut lines));
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Data(format!(
                "line {lineno}: expected \"token tag\", found {} fields",
                fields.len()
            )));
        }
        check_tag(fields[1], entity_types)
            .map_err(|e| Error::Data(format!("line {lineno}: {e}")))?;
        tokens.push(fields[0].to_string());
        tags.push(fields[1].to_string());
        lines.push(lineno);
    }
    if !tokens.is_empty() {
        sentences.push(Sentence::new(tokens, tags)?);
        lines_of.push(lines);
    }
    let mut issues = validate_scheme(&sentences);
    for issue in &mut issues {
        issue.line = Some(lines_of[issue.sentence][issue.position]);
    }
    Ok(ConllCorpus { sentences, issues })
}

pub fn write_conll(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push(' ');
            out.push_str(tag);
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DEFAULT_ENTITY_TYPES;

    const TWO: &str = "Ada B-PER\nLovelace I-PER\nwrote O\n\nin O\nLondon B-LOC\n";

    #[test]
    fn two_sentence_file_round_trips_bytes() {
        let c = parse_conll(TWO, &DEFAULT_ENTITY_TYPES).unwrap();
        assert_eq!(c.sentences.len(), 2);
        assert!(c.issues.is_empty());
        assert_eq!(write_conll(&c.sentences), TWO);
    }

    #[test]
    fn three_fields_is_an_error_at_that_line() {
        let err = parse_conll("a O\nb c O\n", &DEFAULT_ENTITY_TYPES).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_tag_names_tag_and_line() {
        let err = parse_conll("a O\n\nb B-MISC\n", &DEFAULT_ENTITY_TYPES).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("B-MISC"), "{msg}");
    }

    #[test]
    fn dangling_inside_parses_but_is_reported() {
        let c = parse_conll("x O\ny I-PER\n", &DEFAULT_ENTITY_TYPES).unwrap();
        assert_eq!(c.sentences.len(), 1);
        assert_eq!(c.issues.len(), 1);
        assert_eq!(c.issues[0].line, Some(2));
        assert_eq!(c.issues[0].tag, "I-PER");
    }

    #[test]
    fn tolerates_crlf_and_extra_blank_lines() {
        let c = parse_conll("\r\na O\r\n\r\n\r\nb B-ORG\r\n", &DEFAULT_ENTITY_TYPES).unwrap();
        assert_eq!(c.sentences.len(), 2);
        assert_eq!(c.sentences[1].tags[0], "B-ORG");
    }
}
