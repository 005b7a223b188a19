use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Corpus;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;

/// Default rare-token threshold.
pub const DEFAULT_MIN_FREQ: usize = 5;

const STOPWORDS_EN: &str = include_str!("../../data/stopwords_en.txt");
const GROUP_IDENTIFIERS: &str = include_str!("../../data/group_identifiers.txt");

/// Parses a one-token-per-line list; blank lines and `#` comments are skipped.
pub fn parse_token_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

pub fn load_token_list(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_token_list(&text))
}

/// The shipped English stop-word list.
pub fn default_stopwords() -> BTreeSet<String> {
    parse_token_list(STOPWORDS_EN)
}

/// The shipped group-identifier lexicon used by the `comb` and
/// `pre_def_only` modes.
pub fn default_lexicon() -> BTreeSet<String> {
    parse_token_list(GROUP_IDENTIFIERS)
}

/// Bijective token/id map with reserved PAD, UNK and MASK ids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    frequencies: BTreeMap<String, usize>,
    min_freq: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens with frequency below `min_freq` are left out and map to UNK.
    /// Retained tokens are ordered by descending frequency, then
    /// lexicographically.
    pub fn build(corpus: &Corpus, min_freq: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for inst in &corpus.instances {
            for tok in &inst.tokens {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !is_reserved(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut tokens = vec![PAD.to_string(), UNK.to_string(), MASK.to_string()];
        let mut frequencies = BTreeMap::new();
        for (t, c) in kept {
            tokens.push(t.to_string());
            frequencies.insert(t.to_string(), c);
        }
        Self::from_parts(tokens, frequencies, min_freq)
    }

    fn from_parts(tokens: Vec<String>, frequencies: BTreeMap<String, usize>, min_freq: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, frequencies, min_freq, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Frequency in the fitting corpus (0 for unknown and reserved tokens).
    pub fn frequency(&self, token: &str) -> usize {
        self.frequencies.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Content hash over the ordered token list; checkpoints carry it.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Vocabulary = serde_json::from_str(&text)?;
        Ok(Self::from_parts(v.tokens, v.frequencies, v.min_freq))
    }
}

pub fn is_reserved(token: &str) -> bool {
    matches!(token, PAD | UNK | MASK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Instance, Label, Split};

    fn corpus_with(counts: &[(&str, usize)]) -> Corpus {
        let mut instances = Vec::new();
        for (tok, n) in counts {
            for i in 0..*n {
                instances.push(Instance::new(format!("{tok}-{i}"), vec![tok.to_string()], Label::Hate));
            }
        }
        Corpus::new("c", Split::Train, instances).unwrap()
    }

    #[test]
    fn min_freq_threshold() {
        let v = Vocabulary::build(&corpus_with(&[("cat", 6), ("dog", 4)]), 5);
        assert!(v.contains("cat"));
        assert_eq!(v.frequency("cat"), 6);
        assert_eq!(v.id("dog"), UNK_ID);
        assert_eq!(v.id("cat"), 3);
    }

    #[test]
    fn round_trip_is_identity() {
        let v = Vocabulary::build(&corpus_with(&[("a", 3), ("b", 2), ("c", 2)]), 1);
        for id in 0..v.len() {
            let tok = v.token(id).unwrap();
            assert_eq!(v.id(tok), id);
        }
        assert_eq!(v.token(3), Some("a"));
        assert_eq!(v.token(4), Some("b"));
    }

    #[test]
    fn reserved_tokens_never_collide() {
        let v = Vocabulary::build(&corpus_with(&[("<mask>", 9), ("x", 9)]), 1);
        assert_eq!(v.id(MASK), MASK_ID);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn save_load_preserves_hash() {
        let v = Vocabulary::build(&corpus_with(&[("a", 3), ("b", 2)]), 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        let w = Vocabulary::load(&p).unwrap();
        assert_eq!(v.hash(), w.hash());
        assert_eq!(w.id("b"), v.id("b"));
    }

    #[test]
    fn shipped_lists_parse() {
        let sw = default_stopwords();
        assert!(sw.contains("the") && sw.contains("is"));
        assert!(!sw.contains("women"));
        let lex = default_lexicon();
        assert!(lex.contains("women") && lex.contains("muslims") && lex.contains("africans"));
        assert!(lex.iter().all(|t| !t.contains(' ')));
    }
}
