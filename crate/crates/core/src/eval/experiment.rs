use std::fmt::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{macro_f1, mean_std, paired_bootstrap};
use crate::corpus::{Corpus, Label, Vocabulary};
use crate::error::{Error, Result};
use crate::model::predict;
use crate::refine::{run_dref, RefineConfig, RefineMode};

/// Corpora for one source-to-target transfer, with the source vocabulary.
#[derive(Debug, Clone)]
pub struct CorpusPair {
    pub source: String,
    pub target: String,
    pub source_train: Corpus,
    pub source_val: Option<Corpus>,
    pub target_val: Corpus,
    pub target_test: Corpus,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec<'a> {
    pub pair: &'a CorpusPair,
    pub config: RefineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub source: String,
    pub target: String,
    pub mode: RefineMode,
    pub method: String,
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub macro_f1: Vec<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub selected_epochs: Vec<usize>,
    /// Pooled paired bootstrap against the vanilla cell of the same pair.
    pub p_vs_vanilla: Option<f64>,
    pub significant: Option<bool>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub experiments: Vec<CellResult>,
}

impl ResultsTable {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Fixed-width text rendering, scores in macro-F1 points.
    pub fn format_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:<14} {:<13} {:<21} {:>7} {:>15} {:>8}\n",
            "source", "target", "mode", "method", "lambda", "macro-F1", "p"
        );
        for c in &self.experiments {
            let score = match (c.mean, c.std) {
                (Some(m), Some(sd)) => format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd),
                _ => "failed".to_string(),
            };
            let p = c.p_vs_vanilla.map_or("-".to_string(), |p| {
                format!("{p:.4}{}", if c.significant == Some(true) { "*" } else { "" })
            });
            let _ = writeln!(
                s,
                "{:<14} {:<14} {:<13} {:<21} {:>7} {:>15} {:>8}",
                c.source,
                c.target,
                c.mode.as_str(),
                c.method,
                c.lambda,
                score,
                p
            );
        }
        s
    }
}

struct SeedOutcome {
    f1: f64,
    selected_epoch: usize,
    predictions: Vec<Label>,
}

fn run_seed(spec: &ExperimentSpec<'_>, seed: u64) -> Result<SeedOutcome> {
    let pair = spec.pair;
    let config = RefineConfig { seed, ..spec.config.clone() };
    let run = run_dref(&pair.source_train, pair.source_val.as_ref(), &pair.target_val, &config, &pair.vocab)?;
    let predictions: Vec<Label> =
        predict(&run.params, &pair.vocab, &pair.target_test)?.into_iter().map(|p| p.predicted).collect();
    let f1 = macro_f1(&predictions, &pair.target_test.labels())?;
    Ok(SeedOutcome { f1, selected_epoch: run.selected_epoch, predictions })
}

/// Runs every experiment cell for every seed and compares each cell with
/// the vanilla cell of its corpus pair. A failing seed marks its cell as
/// failed without stopping the other cells.
pub fn cross_corpus_run(
    specs: &[ExperimentSpec<'_>],
    seeds: &[u64],
    n_resamples: usize,
    bootstrap_seed: u64,
) -> Result<ResultsTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let anchor_of = |spec: &ExperimentSpec<'_>| {
        specs.iter().position(|s| {
            s.config.mode == RefineMode::Vanilla
                && s.pair.source == spec.pair.source
                && s.pair.target == spec.pair.target
        })
    };
    let anchors: Vec<usize> = specs
        .iter()
        .map(|s| {
            anchor_of(s).ok_or_else(|| {
                Error::InvalidConfig(format!("no vanilla run for {} -> {}", s.pair.source, s.pair.target))
            })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, u64)> = (0..specs.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let outcomes: Vec<Result<SeedOutcome>> = jobs.par_iter().map(|&(c, s)| run_seed(&specs[c], s)).collect();
    let mut per_cell: Vec<Vec<Result<SeedOutcome>>> = specs.iter().map(|_| Vec::new()).collect();
    for ((c, _), o) in jobs.iter().zip(outcomes) {
        per_cell[*c].push(o);
    }
    let pooled = |cell: &[Result<SeedOutcome>]| -> Option<Vec<Label>> {
        let mut all = Vec::new();
        for o in cell {
            all.extend(o.as_ref().ok()?.predictions.iter().copied());
        }
        Some(all)
    };

    let mut experiments = Vec::with_capacity(specs.len());
    for (c, spec) in specs.iter().enumerate() {
        let cell = &per_cell[c];
        let failure = cell.iter().find_map(|o| o.as_ref().err().map(|e| e.to_string()));
        let ok: Vec<&SeedOutcome> = cell.iter().filter_map(|o| o.as_ref().ok()).collect();
        let f1s: Vec<f64> = ok.iter().map(|o| o.f1).collect();
        let (mean, std) = match failure {
            None => {
                let (m, s) = mean_std(&f1s);
                (Some(m), Some(s))
            }
            Some(_) => (None, None),
        };
        let mut p = None;
        if anchors[c] != c && failure.is_none() {
            if let (Some(a), Some(b)) = (pooled(cell), pooled(&per_cell[anchors[c]])) {
                let gold: Vec<Label> =
                    seeds.iter().flat_map(|_| spec.pair.target_test.labels()).collect();
                p = Some(paired_bootstrap(&a, &b, &gold, n_resamples, bootstrap_seed)?);
            }
        }
        experiments.push(CellResult {
            source: spec.pair.source.clone(),
            target: spec.pair.target.clone(),
            mode: spec.config.mode,
            method: spec.config.method.as_str().to_string(),
            lambda: spec.config.lambda,
            seeds: seeds.to_vec(),
            macro_f1: f1s,
            mean,
            std,
            selected_epochs: ok.iter().map(|o| o.selected_epoch).collect(),
            p_vs_vanilla: p.map(|r| r.p_value),
            significant: p.map(|r| r.significant),
            status: failure.map_or("ok".to_string(), |e| format!("failed: {e}")),
        });
    }
    Ok(ResultsTable { experiments })
}
