//! Scoring, significance testing, multi-seed experiments and heatmaps.

mod experiment;
mod heatmap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

pub use experiment::{cross_corpus_run, CellResult, CorpusPair, ExperimentSpec, ResultsTable};
pub use heatmap::{heatmap_page, render_heatmap, UNIFORM_OPACITY};

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const MIN_RESAMPLES: usize = 1_000;

/// `[[tp, fn], [fp, tn]]` with hate as the positive class; rows are gold.
fn confusion(predictions: &[Label], labels: &[Label]) -> [[usize; 2]; 2] {
    let mut m = [[0; 2]; 2];
    for (p, g) in predictions.iter().zip(labels) {
        m[g.index()][p.index()] += 1;
    }
    m
}

fn f1_from(m: &[[usize; 2]; 2], class: usize) -> f64 {
    let tp = m[class][class] as f64;
    let predicted = (m[0][class] + m[1][class]) as f64;
    let actual = (m[class][0] + m[class][1]) as f64;
    if predicted + actual == 0.0 {
        0.0
    } else {
        2.0 * tp / (predicted + actual)
    }
}

fn macro_from(m: &[[usize; 2]; 2]) -> f64 {
    (f1_from(m, 0) + f1_from(m, 1)) / 2.0
}

/// Unweighted mean of the per-class F1 scores. A class that is neither
/// predicted nor present scores 0.
pub fn macro_f1(predictions: &[Label], labels: &[Label]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::LengthMismatch("cannot score an empty list".into()));
    }
    Ok(macro_from(&confusion(predictions, labels)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub label: String,
    pub seeds: Vec<u64>,
    pub macro_f1: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl ScoreReport {
    pub fn new(label: impl Into<String>, seeds: Vec<u64>, macro_f1: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&macro_f1);
        ScoreReport { label: label.into(), seeds, macro_f1, mean, std }
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    pub n_resamples: usize,
    pub seed: u64,
    pub significant: bool,
}

/// Paired bootstrap: the p-value is the share of resamples on which system
/// A does not beat system B.
pub fn paired_bootstrap(
    preds_a: &[Label],
    preds_b: &[Label],
    labels: &[Label],
    n_resamples: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    if preds_a.len() != labels.len() || preds_b.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "bootstrap inputs have lengths {}, {} and {}",
            preds_a.len(),
            preds_b.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::LengthMismatch("cannot bootstrap an empty list".into()));
    }
    if n_resamples < MIN_RESAMPLES {
        return Err(Error::InvalidConfig(format!("need at least {MIN_RESAMPLES} resamples, got {n_resamples}")));
    }
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0usize;
    for _ in 0..n_resamples {
        let (mut ma, mut mb) = ([[0usize; 2]; 2], [[0usize; 2]; 2]);
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            let g = labels[i].index();
            ma[g][preds_a[i].index()] += 1;
            mb[g][preds_b[i].index()] += 1;
        }
        if macro_from(&ma) <= macro_from(&mb) {
            not_better += 1;
        }
    }
    let p_value = not_better as f64 / n_resamples as f64;
    Ok(SignificanceResult { p_value, n_resamples, seed, significant: p_value < 0.05 })
}
