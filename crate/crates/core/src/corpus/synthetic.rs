//! Synthetic source/target corpora with planted spurious correlations.
//!
//! Labels are fixed per instance by quota, each instance carries genuine
//! tokens of its own class (so the label is a function of its genuine
//! tokens), and every planted token is inserted into a fixed share of
//! instances such that the fraction of its carriers belonging to its class
//! equals the requested correlation for that domain. Counts are allocated by
//! quota rather than sampled, so realized rates match the configured rates up to rounding.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{default_stopwords, Corpus, Instance, Label, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedToken {
    pub token: String,
    pub class: Label,
    pub source_correlation: f64,
    pub target_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenuineToken {
    pub token: String,
    pub class: Label,
}

fn default_planted_rate() -> f64 {
    0.3
}
fn default_hate_rate() -> f64 {
    0.5
}
fn default_genuine_per_instance() -> usize {
    1
}
fn default_genuine_rate() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub instances_per_split: usize,
    #[serde(default)]
    pub planted_tokens: Vec<PlantedToken>,
    pub genuine_signal_tokens: Vec<GenuineToken>,
    pub mean_length: usize,
    pub seed: u64,
    /// Share of instances carrying each planted token.
    #[serde(default = "default_planted_rate")]
    pub planted_rate: f64,
    #[serde(default = "default_hate_rate")]
    pub hate_rate: f64,
    #[serde(default = "default_genuine_per_instance")]
    pub genuine_per_instance: usize,
    /// Share of source instances (per class) that carry genuine tokens.
    /// The rest hold only filler and planted tokens.
    #[serde(default = "default_genuine_rate")]
    pub source_genuine_rate: f64,
    #[serde(default = "default_genuine_rate")]
    pub target_genuine_rate: f64,
    /// Per-split size overrides; unset splits use `instances_per_split`.
    #[serde(default)]
    pub source_train_size: Option<usize>,
    #[serde(default)]
    pub source_val_size: Option<usize>,
    #[serde(default)]
    pub target_val_size: Option<usize>,
    #[serde(default)]
    pub target_test_size: Option<usize>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InfeasibleSpec(m));
        for p in &self.planted_tokens {
            for c in [p.source_correlation, p.target_correlation] {
                if !(0.0..=1.0).contains(&c) {
                    return fail(format!("correlation {c} of {:?} outside [0, 1]", p.token));
                }
            }
        }
        let rates = [self.planted_rate, self.hate_rate, self.source_genuine_rate, self.target_genuine_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return fail("planted_rate, hate_rate and genuine rates must lie in [0, 1]".into());
        }
        let planted: BTreeSet<&str> = self.planted_tokens.iter().map(|p| p.token.as_str()).collect();
        let genuine: BTreeSet<&str> = self.genuine_signal_tokens.iter().map(|g| g.token.as_str()).collect();
        if planted.len() != self.planted_tokens.len() || genuine.len() != self.genuine_signal_tokens.len() {
            return fail("duplicate named token".into());
        }
        if let Some(t) = planted.intersection(&genuine).next() {
            return fail(format!("{t:?} is both planted and genuine"));
        }
        for label in Label::ALL {
            if !self.genuine_signal_tokens.iter().any(|g| g.class == label) {
                return fail(format!("no genuine tokens for class {label}"));
            }
        }
        let named = planted.len() + genuine.len();
        if self.vocab_size <= named {
            return fail(format!("vocab_size {} cannot hold {named} named tokens plus filler", self.vocab_size));
        }
        if self.mean_length == 0 || self.genuine_per_instance == 0 {
            return fail("mean_length and genuine_per_instance must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpora {
    pub source_train: Corpus,
    pub source_val: Corpus,
    pub target_val: Corpus,
    pub target_test: Corpus,
}

#[derive(Clone, Copy)]
enum Domain {
    Source,
    Target,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpora> {
    spec.validate()?;
    let filler = filler_tokens(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = |o: Option<usize>| o.unwrap_or(spec.instances_per_split);
    let mut gen = |name: &str, split: Split, domain: Domain, n: usize| {
        generate_split(spec, &filler, name, split, domain, n, &mut rng)
    };
    Ok(SyntheticCorpora {
        source_train: gen("source", Split::Train, Domain::Source, size(spec.source_train_size))?,
        source_val: gen("source", Split::Val, Domain::Source, size(spec.source_val_size))?,
        target_val: gen("target", Split::Val, Domain::Target, size(spec.target_val_size))?,
        target_test: gen("target", Split::Test, Domain::Target, size(spec.target_test_size))?,
    })
}

fn generate_split(
    spec: &SyntheticSpec,
    filler: &[String],
    name: &str,
    split: Split,
    domain: Domain,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Corpus> {
    let n_hate = (spec.hate_rate * n as f64).round() as usize;
    let mut labels: Vec<Label> = (0..n).map(|i| if i < n_hate { Label::Hate } else { Label::NonHate }).collect();
    labels.shuffle(rng);

    let genuine_rate = match domain {
        Domain::Source => spec.source_genuine_rate,
        Domain::Target => spec.target_genuine_rate,
    };
    let mut has_genuine = vec![genuine_rate >= 1.0; n];
    for class in Label::ALL.into_iter().filter(|_| genuine_rate < 1.0) {
        let mut pool: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        let want = (genuine_rate * pool.len() as f64).round() as usize;
        pool.shuffle(rng);
        for &i in &pool[..want] {
            has_genuine[i] = true;
        }
    }

    let mut carriers: Vec<Vec<&str>> = vec![Vec::new(); n];
    for p in &spec.planted_tokens {
        let corr = match domain {
            Domain::Source => p.source_correlation,
            Domain::Target => p.target_correlation,
        };
        let n_carry = (spec.planted_rate * n as f64).round() as usize;
        let n_same = (corr * n_carry as f64).round() as usize;
        let n_other = n_carry - n_same;
        for (class, want) in [(p.class, n_same), (p.class.other(), n_other)] {
            let mut pool: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            if pool.len() < want {
                return Err(Error::InfeasibleSpec(format!(
                    "{name}/{split}: {:?} needs {want} {class} carriers but only {} {class} instances exist",
                    p.token,
                    pool.len()
                )));
            }
            pool.shuffle(rng);
            for &i in &pool[..want] {
                carriers[i].push(&p.token);
            }
        }
    }

    let genuine_by_class = |c: Label| -> Vec<&str> {
        spec.genuine_signal_tokens.iter().filter(|g| g.class == c).map(|g| g.token.as_str()).collect()
    };
    let genuine = [genuine_by_class(Label::Hate), genuine_by_class(Label::NonHate)];
    let lo = (spec.mean_length / 2).max(1);
    let hi = spec.mean_length + spec.mean_length / 2;

    let mut instances = Vec::with_capacity(n);
    for (i, label) in labels.iter().enumerate() {
        let pool = &genuine[label.index()];
        let count = if has_genuine[i] { spec.genuine_per_instance } else { 0 };
        let mut tokens: Vec<String> = (0..count)
            .map(|_| pool[rng.gen_range(0..pool.len())].to_string())
            .collect();
        tokens.extend(carriers[i].iter().map(|t| t.to_string()));
        let len = rng.gen_range(lo..=hi).max(tokens.len());
        while tokens.len() < len {
            tokens.push(filler[rng.gen_range(0..filler.len())].clone());
        }
        tokens.shuffle(rng);
        let id = format!("{name}-{split}-{i:05}");
        instances.push(Instance::new(id, tokens, *label));
    }
    Corpus::new(name, split, instances)
}

/// Deterministic pseudo-words (three consonant-vowel syllables) that avoid
/// stop-words and the configured named tokens.
fn filler_tokens(spec: &SyntheticSpec) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let stop = default_stopwords();
    let named: BTreeSet<&str> = spec
        .planted_tokens
        .iter()
        .map(|p| p.token.as_str())
        .chain(spec.genuine_signal_tokens.iter().map(|g| g.token.as_str()))
        .collect();
    let want = spec.vocab_size - named.len();
    let n_syll = CONSONANTS.len() * VOWELS.len();
    let mut out = Vec::with_capacity(want);
    let mut i = 0usize;
    while out.len() < want {
        let mut word = String::with_capacity(6);
        let mut k = i;
        for _ in 0..3 {
            let s = k % n_syll;
            word.push(CONSONANTS[s / VOWELS.len()] as char);
            word.push(VOWELS[s % VOWELS.len()] as char);
            k /= n_syll;
        }
        if !stop.contains(&word) && !named.contains(word.as_str()) {
            out.push(word);
        }
        i += 1;
    }
    out
}
