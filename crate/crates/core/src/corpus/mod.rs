//! Corpus ingestion, splitting and vocabulary construction.

mod preprocess;
pub mod synthetic;
mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use preprocess::{preprocess, Preprocessor, HANDLE_MIN_COUNT};
pub use synthetic::{generate_synthetic, PlantedToken, SyntheticCorpora, SyntheticSpec};
pub use vocab::{
    default_lexicon, default_stopwords, is_reserved, load_token_list, parse_token_list, Vocabulary,
    DEFAULT_MIN_FREQ, MASK, MASK_ID, PAD, PAD_ID, UNK, UNK_ID,
};

/// Binary class. Hate is the positive class and occupies output index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "hate")]
    Hate,
    #[serde(rename = "non-hate")]
    NonHate,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Hate, Label::NonHate];

    pub fn index(self) -> usize {
        match self {
            Label::Hate => 0,
            Label::NonHate => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Hate),
            1 => Some(Label::NonHate),
            _ => None,
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Hate => Label::NonHate,
            Label::NonHate => Label::Hate,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Hate => "hate",
            Label::NonHate => "non-hate",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hate" => Ok(Label::Hate),
            "non-hate" => Ok(Label::NonHate),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: Label,
    pub raw_text: String,
}

impl Instance {
    /// Builds an already-tokenized instance; `raw_text` is the space-joined
    /// tokens.
    pub fn new(id: impl Into<String>, tokens: Vec<String>, label: Label) -> Self {
        let raw_text = tokens.join(" ");
        Instance { id: id.into(), tokens, label, raw_text }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub split: Split,
    pub instances: Vec<Instance>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, split: Split, instances: Vec<Instance>) -> Result<Self> {
        let mut seen = HashSet::new();
        for inst in &instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::DuplicateId(inst.id.clone()));
            }
        }
        Ok(Corpus { name: name.into(), split, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.instances.iter().map(|i| i.label).collect()
    }

    /// Writes the corpus as JSON-lines; `text` holds the space-joined tokens.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for inst in &self.instances {
            let rec = Record { id: inst.id.clone(), text: inst.tokens.join(" "), label: inst.label.as_str().into() };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    label: String,
}

/// A loaded corpus plus the ids of records dropped for being empty after
/// preprocessing.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub dropped: Vec<String>,
}

/// Loads a JSON-lines corpus file (`id`, `text`, `label` per line).
pub fn load_corpus(path: impl AsRef<Path>, split: Split) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedLine { line: i + 1, message: e.to_string() })?;
        let label = rec
            .label
            .parse::<Label>()
            .map_err(|label| Error::UnknownLabel { id: rec.id.clone(), label })?;
        records.push((rec.id, rec.text, label));
    }

    let pre = Preprocessor::fit(records.iter().map(|(_, t, _)| t.as_str()));
    let mut instances = Vec::with_capacity(records.len());
    let mut dropped = Vec::new();
    for (id, text, label) in records {
        let tokens = pre.preprocess(&text);
        if tokens.is_empty() {
            dropped.push(id);
        } else {
            instances.push(Instance { id, tokens, label, raw_text: text });
        }
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(LoadedCorpus { corpus: Corpus::new(name, split, instances)?, dropped })
}

/// Seeded partition into train/val/test. Val and test sizes are floored and
/// the remainder goes to train; each part keeps the original order.
pub fn split_corpus(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(ratios));
    }
    let n = corpus.len();
    let n_val = (n as f64 * ratios[1] + 1e-9).floor() as usize;
    let n_test = (n as f64 * ratios[2] + 1e-9).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val_idx, rest) = order.split_at(n_val);
    let (test_idx, train_idx) = rest.split_at(n_test);

    let take = |idx: &[usize], split: Split| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Corpus {
            name: corpus.name.clone(),
            split,
            instances: idx.into_iter().map(|i| corpus.instances[i].clone()).collect(),
        }
    };
    Ok((take(train_idx, Split::Train), take(val_idx, Split::Val), take(test_idx, Split::Test)))
}
