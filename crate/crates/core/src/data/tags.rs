use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Entity types of the MasakhaNER label scheme.
pub const DEFAULT_ENTITY_TYPES: [&str; 4] = ["PER", "ORG", "LOC", "DATE"];

/// One parsed BIO tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Tag<'a> {
    /// Parse `O`, `B-X` or `I-X`. The entity type is not checked.
    pub fn parse(s: &'a str) -> Result<Self> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        match s.split_once('-') {
            Some(("B", ty)) if !ty.is_empty() => Ok(Tag::Begin(ty)),
            Some(("I", ty)) if !ty.is_empty() => Ok(Tag::Inside(ty)),
            _ => Err(Error::Data(format!("unknown tag {s:?}"))),
        }
    }

    pub fn entity_type(&self) -> Option<&'a str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }
}

/// Check that `tag` is well formed and its type is one of `entity_types`.
pub fn check_tag(tag: &str, entity_types: &[&str]) -> Result<()> {
    let parsed = Tag::parse(tag)?;
    match parsed.entity_type() {
        Some(ty) if !entity_types.contains(&ty) => Err(Error::Data(format!(
            "tag {tag:?} uses entity type {ty:?} outside {entity_types:?}"
        ))),
        _ => Ok(()),
    }
}

/// A tokenized sentence with one BIO tag per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::Data(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(Self { tokens, tags })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// An `I-X` tag that does not continue a `B-X`/`I-X` run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemeIssue {
    pub sentence: usize,
    pub position: usize,
    /// 1-based line in the source file, when known.
    pub line: Option<usize>,
    pub tag: String,
}

/// Find BIO continuity violations. Tags are assumed syntactically valid.
pub fn validate_scheme(sentences: &[Sentence]) -> Vec<SchemeIssue> {
    let mut issues = Vec::new();
    for (si, s) in sentences.iter().enumerate() {
        let mut prev: Option<&str> = None;
        for (pos, tag) in s.tags.iter().enumerate() {
            match Tag::parse(tag) {
                Ok(Tag::Inside(ty)) if prev != Some(ty) => issues.push(SchemeIssue {
                    sentence: si,
                    position: pos,
                    line: None,
                    tag: tag.clone(),
                }),
                _ => {}
            }
            prev = Tag::parse(tag).ok().and_then(|t| t.entity_type());
        }
    }
    issues
}

/// Class-id assignment for tags: `O` first, then `B-X`, `I-X` per entity type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    labels: Vec<String>,
}

impl TagSet {
    pub fn new(entity_types: &[&str]) -> Self {
        let mut labels = Vec::with_capacity(1 + 2 * entity_types.len());
        labels.push("O".to_string());
        for ty in entity_types {
            labels.push(format!("B-{ty}"));
            labels.push(format!("I-{ty}"));
        }
        Self { labels }
    }

    /// Rebuild from an explicit label list (for example one read back from disk).
    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        for l in &labels {
            Tag::parse(l)?;
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Data(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == tag)
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn entity_types(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for l in &self.labels {
            if let Ok(Some(ty)) = Tag::parse(l).map(|t| t.entity_type()) {
                if !out.contains(&ty) {
                    out.push(ty);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sent(tags: &[&str]) -> Sentence {
        Sentence::new(
            tags.iter().map(|_| "w".to_string()).collect(),
            tags.iter().map(|t| t.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_bio_tags() {
        assert_eq!(Tag::parse("O").unwrap(), Tag::Outside);
        assert_eq!(Tag::parse("B-PER").unwrap(), Tag::Begin("PER"));
        assert_eq!(Tag::parse("I-DATE").unwrap(), Tag::Inside("DATE"));
        assert!(Tag::parse("X-PER").is_err());
        assert!(Tag::parse("B-").is_err());
        assert!(check_tag("B-MISC", &DEFAULT_ENTITY_TYPES).is_err());
    }

    #[test]
    fn dangling_inside_is_flagged() {
        let issues = validate_scheme(&[
            sent(&["O", "I-PER", "I-PER"]),
            sent(&["B-LOC", "I-LOC", "I-PER"]),
            sent(&["B-ORG", "I-ORG", "O"]),
        ]);
        assert_eq!(issues.len(), 2);
        assert_eq!((issues[0].sentence, issues[0].position), (0, 1));
        assert_eq!((issues[1].sentence, issues[1].position), (1, 2));
    }

    #[test]
    fn tagset_layout() {
        let ts = TagSet::new(&DEFAULT_ENTITY_TYPES);
        assert_eq!(ts.len(), 9);
        assert_eq!(ts.id("O"), Some(0));
        assert_eq!(ts.label(ts.id("I-LOC").unwrap()), "I-LOC");
        assert_eq!(ts.entity_types(), vec!["PER", "ORG", "LOC", "DATE"]);
    }
}
