//! Spurious-token extraction.
//!
//! A global, class-specific ranking is built from the source training
//! corpus by averaging sigmoid-normalized token attributions over the
//! instances predicted as each class. Validation errors on the target corpus
//! then nominate candidates: tokens in the top-k of false positives that
//! never reach the top-k of a true positive, restricted to the top-N of the
//! hate ranking (and symmetrically for false negatives).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionRecord, Attributor, Target};
use crate::corpus::{default_stopwords, is_reserved, Corpus, Label, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const DEFAULT_TOP_N: usize = 500;
pub const K_FRACTION_GRID: [f64; 4] = [0.10, 0.20, 0.30, 0.40];
/// Chi-squared critical value for one degree of freedom at 95% confidence.
pub const CHI2_CRITICAL_95: f64 = 3.841;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub k_fraction: f64,
    pub top_n: usize,
    pub min_token_freq: usize,
    #[serde(skip, default = "default_stopwords")]
    pub stopwords: BTreeSet<String>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            k_fraction: 0.10,
            top_n: DEFAULT_TOP_N,
            min_token_freq: crate::corpus::DEFAULT_MIN_FREQ,
            stopwords: default_stopwords(),
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("k_fraction must be in (0, 1], got {}", self.k_fraction)));
        }
        if self.top_n == 0 {
            return Err(Error::InvalidConfig("top_n must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRanking {
    pub epoch: usize,
    pub hate: Vec<(String, f64)>,
    pub non_hate: Vec<(String, f64)>,
}

impl GlobalRanking {
    pub fn list(&self, class: Label) -> &[(String, f64)] {
        match class {
            Label::Hate => &self.hate,
            Label::NonHate => &self.non_hate,
        }
    }

    pub fn top_n(&self, class: Label, n: usize) -> BTreeSet<String> {
        self.list(class).iter().take(n).map(|(t, _)| t.clone()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpuriousTokenSet {
    pub epoch: usize,
    pub fp_branch: BTreeSet<String>,
    pub fn_branch: BTreeSet<String>,
}

impl SpuriousTokenSet {
    pub fn empty(epoch: usize) -> Self {
        SpuriousTokenSet { epoch, ..Default::default() }
    }

    pub fn combined(&self) -> BTreeSet<String> {
        self.fp_branch.union(&self.fn_branch).cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.fp_branch.is_empty() && self.fn_branch.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Explains every instance toward its predicted class, in corpus order.
pub fn explain_corpus(
    params: &ModelParams,
    vocab: &Vocabulary,
    corpus: &Corpus,
    attributor: &Attributor,
) -> Result<Vec<AttributionRecord>> {
    corpus
        .instances
        .par_iter()
        .map(|inst| attributor.explain(params, vocab, inst, Target::Predicted))
        .collect()
}

fn occurrence_counts(corpus: &Corpus) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for inst in &corpus.instances {
        for t in &inst.tokens {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    counts
}

fn sort_ranking(list: &mut [(String, f64)]) {
    list.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
}

/// Builds the ranking from records explaining `corpus` in order.
pub fn global_ranking_from_records(
    records: &[AttributionRecord],
    corpus: &Corpus,
    config: &ExtractionConfig,
    epoch: usize,
) -> Result<GlobalRanking> {
    if records.len() != corpus.len() {
        return Err(Error::LengthMismatch(format!("{} records for {} instances", records.len(), corpus.len())));
    }
    let freq = occurrence_counts(corpus);
    let eligible = |t: &str| {
        !is_reserved(t) && !config.stopwords.contains(t) && freq.get(t).copied().unwrap_or(0) >= config.min_token_freq
    };
    let mut sums: [BTreeMap<&str, (f64, usize)>; 2] = [BTreeMap::new(), BTreeMap::new()];
    for (rec, inst) in records.iter().zip(&corpus.instances) {
        if rec.instance_id != inst.id || rec.normalized_scores.len() != inst.tokens.len() {
            return Err(Error::LengthMismatch(format!("record {} does not match its instance", rec.instance_id)));
        }
        let table = &mut sums[rec.target_class.index()];
        for (tok, &score) in inst.tokens.iter().zip(&rec.normalized_scores) {
            if eligible(tok) {
                let e = table.entry(tok.as_str()).or_insert((0.0, 0));
                e.0 += score;
                e.1 += 1;
            }
        }
    }
    let finish = |m: &BTreeMap<&str, (f64, usize)>| {
        let mut v: Vec<(String, f64)> = m.iter().map(|(t, (s, n))| (t.to_string(), s / *n as f64)).collect();
        sort_ranking(&mut v);
        v
    };
    Ok(GlobalRanking { epoch, hate: finish(&sums[0]), non_hate: finish(&sums[1]) })
}

/// Class-specific global token ranking over `source_train`.
pub fn global_ranking(
    params: &ModelParams,
    vocab: &Vocabulary,
    source_train: &Corpus,
    attributor: &Attributor,
    config: &ExtractionConfig,
    epoch: usize,
) -> Result<GlobalRanking> {
    config.validate()?;
    let records = explain_corpus(params, vocab, source_train, attributor)?;
    global_ranking_from_records(&records, source_train, config, epoch)
}

/// `max(1, ceil(k_fraction * len))`, with a small tolerance so that products
/// such as `0.3 * 10` are not pushed up by rounding.
pub fn top_k_size(k_fraction: f64, len: usize) -> usize {
    ((k_fraction * len as f64 - 1e-9).ceil().max(1.0) as usize).min(len.max(1))
}

/// Highest-scoring tokens of one record, best first, duplicates dropped.
pub fn local_topk(record: &AttributionRecord, k_fraction: f64) -> Vec<String> {
    let k = top_k_size(k_fraction, record.raw_scores.len());
    let mut order: Vec<usize> = (0..record.raw_scores.len()).collect();
    order.sort_by(|&a, &b| {
        record.raw_scores[b].partial_cmp(&record.raw_scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    let mut seen = HashSet::new();
    order
        .into_iter()
        .take(k)
        .map(|i| record.tokens[i].clone())
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

/// Applies the error-branch set algebra to explained validation instances.
/// Each record must target the instance's predicted class.
pub fn spurious_from_records(
    gold: &[Label],
    records: &[AttributionRecord],
    ranking: &GlobalRanking,
    config: &ExtractionConfig,
) -> Result<SpuriousTokenSet> {
    if gold.len() != records.len() {
        return Err(Error::LengthMismatch(format!("{} labels for {} records", gold.len(), records.len())));
    }
    // Index by (gold, predicted): [TP, FN], [FP, TN].
    let mut unions: [[BTreeSet<String>; 2]; 2] = Default::default();
    for (&g, rec) in gold.iter().zip(records) {
        unions[g.index()][rec.target_class.index()].extend(local_topk(rec, config.k_fraction));
    }
    let (h, n) = (Label::Hate.index(), Label::NonHate.index());
    let branch = |errors: &BTreeSet<String>, correct: &BTreeSet<String>, class: Label| -> BTreeSet<String> {
        let top = ranking.top_n(class, config.top_n);
        errors.difference(correct).filter(|t| top.contains(*t)).cloned().collect()
    };
    Ok(SpuriousTokenSet {
        epoch: ranking.epoch,
        fp_branch: branch(&unions[n][h], &unions[h][h], Label::Hate),
        fn_branch: branch(&unions[h][n], &unions[n][n], Label::NonHate),
    })
}

pub fn extract_spurious(
    params: &ModelParams,
    vocab: &Vocabulary,
    target_val: &Corpus,
    ranking: &GlobalRanking,
    attributor: &Attributor,
    config: &ExtractionConfig,
) -> Result<SpuriousTokenSet> {
    config.validate()?;
    let records = explain_corpus(params, vocab, target_val, attributor)?;
    spurious_from_records(&target_val.labels(), &records, ranking, config)
}

/// Yates-corrected chi-squared statistic of a 2x2 table, or `None` when an
/// expected count is zero.
pub fn yates_chi_squared(table: [[u64; 2]; 2]) -> Option<f64> {
    let [[a, b], [c, d]] = table.map(|r| r.map(|x| x as f64));
    let n = a + b + c + d;
    let margins = (a + b) * (c + d) * (a + c) * (b + d);
    if margins == 0.0 {
        return None;
    }
    let diff = ((a * d - b * c).abs() - n / 2.0).max(0.0);
    Some(n * diff * diff / margins)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChiSquaredTokens {
    pub tokens: BTreeSet<String>,
    pub statistics: BTreeMap<String, f64>,
    /// Candidates whose table had a zero expected count.
    pub skipped: Vec<String>,
}

fn presence(corpus: &Corpus) -> HashMap<&str, u64> {
    let mut m = HashMap::new();
    for inst in &corpus.instances {
        let uniq: HashSet<&str> = inst.tokens.iter().map(String::as_str).collect();
        for t in uniq {
            *m.entry(t).or_insert(0) += 1;
        }
    }
    m
}

/// Source tokens whose instance-level presence differs between the two
/// corpora at 95% confidence.
pub fn chi_squared_tokens(source_train: &Corpus, target_ref: &Corpus, min_freq: usize) -> Result<ChiSquaredTokens> {
    if source_train.is_empty() || target_ref.is_empty() {
        return Err(Error::InvalidConfig("chi-squared extraction needs two non-empty corpora".into()));
    }
    let freq = occurrence_counts(source_train);
    let (ps, pt) = (presence(source_train), presence(target_ref));
    let (ns, nt) = (source_train.len() as u64, target_ref.len() as u64);
    let mut candidates: Vec<&str> =
        freq.iter().filter(|(t, &c)| c >= min_freq && !is_reserved(t)).map(|(t, _)| *t).collect();
    candidates.sort_unstable();

    let mut out = ChiSquaredTokens::default();
    for tok in candidates {
        let s = ps.get(tok).copied().unwrap_or(0);
        let t = pt.get(tok).copied().unwrap_or(0);
        match yates_chi_squared([[s, ns - s], [t, nt - t]]) {
            None => out.skipped.push(tok.to_string()),
            Some(x) => {
                if x > CHI2_CRITICAL_95 {
                    out.tokens.insert(tok.to_string());
                }
                out.statistics.insert(tok.to_string(), x);
            }
        }
    }
    Ok(out)
}
