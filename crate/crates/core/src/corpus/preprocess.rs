//! Tweet-style text normalization.
//!
//! URLs are removed, hashtags are split into words (camel-case boundaries
//! first, then greedy longest-match against a word dictionary), user handles
//! seen fewer than [`HANDLE_MIN_COUNT`] times are dropped, punctuation and
//! pure numbers are removed, and everything is lowercased.

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;

/// Handles occurring fewer times than this across the corpus are removed.
pub const HANDLE_MIN_COUNT: usize = 10;

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:https?://|www\.)\S+").unwrap())
}

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{L}\p{N}]+(?:'[\p{L}\p{N}]+)*").unwrap())
}

fn handle_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^@(\w+)").unwrap())
}

/// Corpus-aware preprocessor. The default instance knows no handles (so all
/// handles are dropped) and has an empty segmentation dictionary.
#[derive(Debug, Clone, Default)]
pub struct Preprocessor {
    handle_counts: HashMap<String, usize>,
    dictionary: HashSet<String>,
    max_word_chars: usize,
}

impl Preprocessor {
    /// Collects handle counts and the hashtag segmentation dictionary (plain
    /// words of two or more letters) from a corpus.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut pre = Preprocessor::default();
        for text in texts {
            let text = normalize_quotes(text);
            let text = url_re().replace_all(&text, " ");
            for chunk in text.split_whitespace() {
                if let Some(handle) = parse_handle(chunk) {
                    *pre.handle_counts.entry(handle).or_default() += 1;
                } else if !chunk.starts_with('#') {
                    for m in word_re().find_iter(chunk) {
                        let w = m.as_str().to_lowercase();
                        if w.chars().count() >= 2 && w.chars().all(char::is_alphabetic) {
                            pre.add_word(w);
                        }
                    }
                }
            }
        }
        pre
    }

    pub fn with_dictionary(mut self, words: impl IntoIterator<Item = String>) -> Self {
        for w in words {
            self.add_word(w.to_lowercase());
        }
        self
    }

    fn add_word(&mut self, w: String) {
        self.max_word_chars = self.max_word_chars.max(w.chars().count());
        self.dictionary.insert(w);
    }

    pub fn handle_count(&self, handle: &str) -> usize {
        self.handle_counts.get(&handle.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn preprocess(&self, raw_text: &str) -> Vec<String> {
        let text = normalize_quotes(raw_text);
        let text = url_re().replace_all(&text, " ");
        let mut tokens = Vec::new();
        for chunk in text.split_whitespace() {
            if let Some(handle) = parse_handle(chunk) {
                if self.handle_count(&handle) >= HANDLE_MIN_COUNT {
                    tokens.push(handle);
                }
            } else if let Some(tag) = chunk.strip_prefix('#') {
                for piece in camel_case_pieces(tag) {
                    let lower = piece.to_lowercase();
                    if is_number(&lower) {
                        continue;
                    }
                    tokens.extend(self.segment(&lower));
                }
            } else {
                tokens.extend(
                    word_re()
                        .find_iter(chunk)
                        .map(|m| m.as_str().to_lowercase())
                        .filter(|w| !is_number(w)),
                );
            }
        }
        tokens
    }

    /// Greedy longest-match segmentation; characters not covered by any
    /// dictionary word are kept together as one token.
    fn segment(&self, word: &str) -> Vec<String> {
        if self.dictionary.is_empty() || self.dictionary.contains(word) {
            return vec![word.to_string()];
        }
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut unknown = String::new();
        let mut i = 0;
        while i < chars.len() {
            let longest = (i + 2..=chars.len().min(i + self.max_word_chars))
                .rev()
                .find(|&j| self.dictionary.contains(&chars[i..j].iter().collect::<String>()));
            match longest {
                Some(j) => {
                    if !unknown.is_empty() {
                        out.push(std::mem::take(&mut unknown));
                    }
                    out.push(chars[i..j].iter().collect());
                    i = j;
                }
                None => {
                    unknown.push(chars[i]);
                    i += 1;
                }
            }
        }
        if !unknown.is_empty() {
            out.push(unknown);
        }
        out
    }
}

/// Preprocess with a default (corpus-unaware) [`Preprocessor`].
pub fn preprocess(raw_text: &str) -> Vec<String> {
    Preprocessor::default().preprocess(raw_text)
}

fn normalize_quotes(text: &str) -> String {
    text.replace(['\u{2019}', '\u{2018}'], "'")
}

fn parse_handle(chunk: &str) -> Option<String> {
    handle_re()
        .captures(chunk)
        .map(|c| format!("@{}", c[1].to_lowercase()))
}

fn is_number(token: &str) -> bool {
    token.chars().all(|c| c.is_numeric() || c == '\'')
}

/// Splits a hashtag body on camel-case, letter/digit and punctuation
/// boundaries: `KillAllMen` -> `Kill`, `All`, `Men`; `HTMLParser` ->
/// `HTML`, `Parser`.
fn camel_case_pieces(tag: &str) -> Vec<String> {
    let chars: Vec<char> = tag.chars().collect();
    let mut pieces = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_alphanumeric() {
            if !cur.is_empty() {
                pieces.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if let Some(&prev) = cur.chars().last().as_ref() {
            let next = chars.get(i + 1).copied();
            let boundary = (prev.is_lowercase() && c.is_uppercase())
                || (prev.is_alphabetic() != c.is_alphabetic())
                || (prev.is_uppercase()
                    && c.is_uppercase()
                    && next.is_some_and(char::is_lowercase));
            if boundary {
                pieces.push(std::mem::take(&mut cur));
            }
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        pieces.push(cur);
    }
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn removes_urls() {
        assert_eq!(
            preprocess("Genocide is never ok http://t.co/abc"),
            vec!["genocide", "is", "never", "ok"]
        );
        assert_eq!(preprocess("see www.example.com/x now"), vec!["see", "now"]);
        assert!(preprocess("https://t.co/xyz").is_empty());
    }

    #[test]
    fn splits_camel_case_hashtags() {
        assert_eq!(preprocess("#KillAllMen"), vec!["kill", "all", "men"]);
        assert_eq!(preprocess("#HTMLParser"), vec!["html", "parser"]);
        assert_eq!(preprocess("#build2020now"), vec!["build", "now"]);
    }

    #[test]
    fn drops_punctuation_and_numbers() {
        assert_eq!(preprocess("Women!!! 123"), vec!["women"]);
        assert_eq!(preprocess("don’t... 3.14 stop"), vec!["don't", "stop"]);
    }

    #[test]
    fn segments_lowercase_hashtags_with_corpus_dictionary() {
        let pre = Preprocessor::fit(["we will kill it", "all of them", "men and women"]);
        assert_eq!(pre.preprocess("#killallmen"), vec!["kill", "all", "men"]);
        assert_eq!(pre.preprocess("#menxyz"), vec!["men", "xyz"]);
    }

    #[test]
    fn infrequent_handles_are_removed() {
        let mut texts: Vec<String> = (0..HANDLE_MIN_COUNT).map(|_| "@Famous hi".to_string()).collect();
        texts.push("@rare hi".to_string());
        let pre = Preprocessor::fit(texts.iter().map(String::as_str));
        assert_eq!(pre.preprocess("@famous: @rare hello"), vec!["@famous", "hello"]);
        assert_eq!(preprocess("@famous hello"), vec!["hello"]);
    }

    proptest! {
        #[test]
        fn preprocess_is_idempotent(text in "[ a-zA-Z0-9#@!?.,:/'_-]{0,60}") {
            let pre = Preprocessor::fit([text.as_str(), "@abc x", "kill all men"]);
            let once = pre.preprocess(&text);
            let twice = pre.preprocess(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn output_is_lowercase_and_non_numeric(text in "\\PC{0,40}") {
            for tok in preprocess(&text) {
                prop_assert_eq!(tok.to_lowercase(), tok.clone());
                prop_assert!(!is_number(&tok));
                prop_assert!(!tok.is_empty());
            }
        }
    }
}
