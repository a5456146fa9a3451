use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Sentences must have strictly more whitespace tokens than this to be kept.
pub const MIN_TOKENS_EXCLUSIVE: usize = 11;

/// Corpus cleaning for pretraining text.
///
/// Drops lines that are empty, lines in which no character is alphanumeric,
/// and lines with `MIN_TOKENS_EXCLUSIVE` or fewer whitespace-separated tokens.
pub fn preprocess_corpus<'a, I>(lines: I) -> Vec<String>
where
    I: IntoIterator<Item = &'a str>,
{
    lines
        .into_iter()
        .filter(|l| keep_line(l))
        .map(|l| l.to_string())
        .collect()
}

pub fn keep_line(line: &str) -> bool {
    if line.trim().is_empty() || !line.chars().any(char::is_alphanumeric) {
        return false;
    }
    line.split_whitespace().count() > MIN_TOKENS_EXCLUSIVE
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn words(n: usize) -> String {
        vec!["tok"; n].join(" ")
    }

    #[test]
    fn length_boundary_is_exclusive() {
        let eleven = words(11);
        let twelve = words(12);
        let out = preprocess_corpus([eleven.as_str(), twelve.as_str()]);
        assert_eq!(out, vec![twelve.clone()]);
    }

    #[test]
    fn punctuation_only_and_empty_lines_are_removed() {
        let punct = "!!! ... ??? ,, ;; -- ** ## @@ $$ %% ^^ &&";
        assert!(punct.split_whitespace().count() > 11);
        assert!(preprocess_corpus(["!!! ... ???", punct, "", "   "]).is_empty());
        assert!(preprocess_corpus(core::iter::empty()).is_empty());
    }

    #[test]
    fn non_ascii_letters_count_as_text() {
        let line = "ọ̀rọ̀ àti ẹ̀kọ́ ní ilé ìwé ní ọjọ́ àìkú àti ọjọ́ ajé";
        assert_eq!(preprocess_corpus([line]).len(), 1);
    }

    #[test]
    fn idempotent() {
        let lines = [words(3), words(20), "?? ?? ??".to_string(), words(12)];
        let once = preprocess_corpus(lines.iter().map(|s| s.as_str()));
        let twice = preprocess_corpus(once.iter().map(|s| s.as_str()));
        assert_eq!(once, twice);
    }
}
