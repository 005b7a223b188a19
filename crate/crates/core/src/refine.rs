//! The refinement loop: train one epoch, extract spurious tokens, penalize
//! them during the next epoch.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{token_score_nodes, AttributionMethod, Attributor, DEFAULT_IG_STEPS};
use crate::autodiff::{Tape, Var};
use crate::corpus::{default_lexicon, is_reserved, load_token_list, Corpus, Instance, Vocabulary, MASK};
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::extraction::{extract_spurious, global_ranking, ExtractionConfig, SpuriousTokenSet};
use crate::model::graph::{self, Forward, ParamVars};
use crate::model::{
    argmax_class, predict, train_epoch, AdamW, AuxiliaryLoss, EpochStats, LossSpec, ModelParams, ParamGrads,
    TrainConfig, DEFAULT_DIM,
};

/// Lexicon path that selects the shipped group-identifier list.
pub const BUILTIN_LEXICON: &str = "builtin:group_identifiers";

pub const LAMBDA_GRID_SCALED_ATTENTION: [f64; 9] = [0.1, 0.5, 1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0];
pub const LAMBDA_GRID_DEEPLIFT: [f64; 9] = LAMBDA_GRID_SCALED_ATTENTION;
pub const LAMBDA_GRID_IG: [f64; 7] = [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0];

pub fn lambda_grid(method: AttributionMethod) -> &'static [f64] {
    match method {
        AttributionMethod::ScaledAttention => &LAMBDA_GRID_SCALED_ATTENTION,
        AttributionMethod::IntegratedGradients => &LAMBDA_GRID_IG,
        AttributionMethod::DeepLift => &LAMBDA_GRID_DEEPLIFT,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Vanilla,
    TokMask,
    Reg,
    Comb,
    PreDefOnly,
}

impl RefineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RefineMode::Vanilla => "vanilla",
            RefineMode::TokMask => "tok_mask",
            RefineMode::Reg => "reg",
            RefineMode::Comb => "comb",
            RefineMode::PreDefOnly => "pre_def_only",
        }
    }

    pub fn needs_lexicon(self) -> bool {
        matches!(self, RefineMode::Comb | RefineMode::PreDefOnly)
    }

    fn extracts(self) -> bool {
        matches!(self, RefineMode::TokMask | RefineMode::Reg | RefineMode::Comb)
    }

    fn regularizes(self) -> bool {
        matches!(self, RefineMode::Reg | RefineMode::Comb | RefineMode::PreDefOnly)
    }
}

impl FromStr for RefineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

impl fmt::Display for RefineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub mode: RefineMode,
    pub method: AttributionMethod,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub lexicon_path: Option<PathBuf>,
    pub extraction: ExtractionConfig,
    pub train: TrainConfig,
    pub dim: usize,
    /// Integration steps when integrated gradients are the method.
    pub ig_steps: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            mode: RefineMode::Reg,
            method: AttributionMethod::ScaledAttention,
            lambda: 1.0,
            epochs: 6,
            seed: 0,
            lexicon_path: None,
            extraction: ExtractionConfig::default(),
            train: TrainConfig::default(),
            dim: DEFAULT_DIM,
            ig_steps: DEFAULT_IG_STEPS,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if self.ig_steps == 0 {
            return Err(Error::ZeroSteps);
        }
        match (self.mode.needs_lexicon(), &self.lexicon_path) {
            (true, None) => return bad(format!("mode {} requires lexicon_path", self.mode)),
            (false, Some(_)) => return bad(format!("mode {} does not use a lexicon", self.mode)),
            (true, Some(p)) if p.as_os_str() != BUILTIN_LEXICON && !p.exists() => {
                return bad(format!("lexicon {} does not exist", p.display()))
            }
            _ => {}
        }
        self.extraction.validate()?;
        self.train.validate()
    }

    pub fn attributor(&self) -> Attributor {
        Attributor { method: self.method, ig_steps: self.ig_steps }
    }

    /// The configured lexicon, or an empty set for modes that do not use one.
    pub fn load_lexicon(&self) -> Result<BTreeSet<String>> {
        match &self.lexicon_path {
            None => Ok(BTreeSet::new()),
            Some(p) if p.as_os_str() == BUILTIN_LEXICON => Ok(default_lexicon()),
            Some(p) => load_token_list(p),
        }
    }
}

/// Replaces every listed token with the mask token.
pub fn apply_tok_mask(corpus: &Corpus, tokens: &BTreeSet<String>) -> Corpus {
    let mut out = corpus.clone();
    if tokens.is_empty() {
        return out;
    }
    for inst in &mut out.instances {
        for t in &mut inst.tokens {
            if tokens.contains(t.as_str()) {
                *t = MASK.to_string();
            }
        }
    }
    out
}

pub fn combine_with_lexicon(spurious: &SpuriousTokenSet, lexicon: &BTreeSet<String>) -> BTreeSet<String> {
    spurious.combined().union(lexicon).cloned().collect()
}

/// Sum of squared attributions, toward the predicted class, of every
/// occurrence of a penalized token.
#[derive(Debug, Clone)]
pub struct AttributionLoss {
    ids: HashSet<usize>,
    method: AttributionMethod,
    ig_steps: usize,
}

impl AttributionLoss {
    /// Tokens outside the vocabulary are ignored: they share the unknown
    /// embedding, and penalizing it would hit every unknown word.
    pub fn new(vocab: &Vocabulary, tokens: &BTreeSet<String>, method: AttributionMethod, ig_steps: usize) -> Self {
        let ids = tokens.iter().filter(|t| !is_reserved(t) && vocab.contains(t)).map(|t| vocab.id(t)).collect();
        AttributionLoss { ids, method, ig_steps }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl AuxiliaryLoss for AttributionLoss {
    fn build(&self, tape: &mut Tape, pv: &ParamVars, f: &Forward, ids: &[usize], instance_id: &str) -> Result<Option<Var>> {
        let hits: Vec<usize> = (0..ids.len()).filter(|&p| self.ids.contains(&ids[p])).collect();
        if hits.is_empty() {
            return Ok(None);
        }
        let z = tape.value(f.logits);
        let class = argmax_class([z[0], z[1]]);
        let phi = token_score_nodes(tape, pv, f, self.method, class, self.ig_steps)?;
        let mut squares = Vec::with_capacity(hits.len());
        for p in hits {
            if !tape.scalar(phi[p]).is_finite() {
                return Err(Error::NonFiniteAttribution { id: instance_id.to_string(), position: p });
            }
            squares.push(tape.square(phi[p]));
        }
        Ok(Some(tape.add_all(&squares)))
    }
}

/// `lambda * L_atr` over `batch` and its parameter gradient.
pub fn attribution_loss(
    params: &ModelParams,
    vocab: &Vocabulary,
    batch: &[Instance],
    tokens: &BTreeSet<String>,
    method: AttributionMethod,
    lambda: f64,
    ig_steps: usize,
) -> Result<(f64, ParamGrads)> {
    if lambda < 0.0 {
        return Err(Error::InvalidConfig("lambda must be non-negative".into()));
    }
    let loss = AttributionLoss::new(vocab, tokens, method, ig_steps);
    let mut total = 0.0;
    let mut grads = ParamGrads::zeros(params.dim);
    for inst in batch {
        let ids = vocab.encode(&inst.tokens);
        if ids.is_empty() {
            return Err(Error::EmptyInstance(inst.id.clone()));
        }
        let mut tape = Tape::new();
        let pv = ParamVars::new(&mut tape, params);
        let xs = params.embed(&mut tape, &ids);
        let f = graph::forward(&mut tape, &pv, xs);
        if let Some(l) = loss.build(&mut tape, &pv, &f, &ids, &inst.id)? {
            let scaled = tape.scale(l, lambda);
            total += tape.scalar(scaled);
            let g = tape.backward(scaled);
            grads.add_assign(&ParamGrads::from_tape(&g, &pv, &f.xs, &ids));
        }
    }
    Ok((total, grads))
}

/// Mean absolute attribution, toward the predicted class, over every
/// occurrence of `tokens` in `corpus`. `None` when no occurrence exists.
pub fn mean_abs_attribution(
    params: &ModelParams,
    vocab: &Vocabulary,
    corpus: &Corpus,
    tokens: &BTreeSet<String>,
    attributor: &Attributor,
) -> Result<Option<f64>> {
    let parts: Vec<(f64, usize)> = corpus
        .instances
        .par_iter()
        .filter(|i| i.tokens.iter().any(|t| tokens.contains(t)))
        .map(|inst| {
            let rec = attributor.explain(params, vocab, inst, crate::attribution::Target::Predicted)?;
            let mut acc = (0.0, 0);
            for (t, s) in inst.tokens.iter().zip(&rec.raw_scores) {
                if tokens.contains(t) {
                    acc.0 += s.abs();
                    acc.1 += 1;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Tokens penalized while training this epoch.
    pub penalized: BTreeSet<String>,
    /// Tokens extracted at the end of this epoch.
    pub extracted: SpuriousTokenSet,
    pub train: EpochStats,
    pub source_val_macro_f1: Option<f64>,
    pub target_val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineRun {
    pub config: RefineConfig,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch with the best target-validation macro-F1.
    pub selected_epoch: usize,
    /// Parameters at `selected_epoch`.
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RefineConfig,
    pub history: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub checkpoint: Option<PathBuf>,
}

impl RefineRun {
    pub fn manifest(&self, checkpoint: Option<PathBuf>) -> RunManifest {
        RunManifest {
            config: self.config.clone(),
            history: self.history.clone(),
            selected_epoch: self.selected_epoch,
            checkpoint,
        }
    }

    pub fn selected(&self) -> &EpochRecord {
        &self.history[self.selected_epoch - 1]
    }
}

impl RunManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn score(params: &ModelParams, vocab: &Vocabulary, corpus: &Corpus) -> Result<f64> {
    let preds: Vec<_> = predict(params, vocab, corpus)?.into_iter().map(|p| p.predicted).collect();
    macro_f1(&preds, &corpus.labels())
}

/// Runs the full loop. The token set extracted after epoch `i` is what
/// epoch `i + 1` penalizes; the first epoch penalizes nothing extracted.
pub fn run_dref(
    source_train: &Corpus,
    source_val: Option<&Corpus>,
    target_val: &Corpus,
    config: &RefineConfig,
    vocab: &Vocabulary,
) -> Result<RefineRun> {
    config.validate()?;
    if source_train.is_empty() || target_val.is_empty() {
        return Err(Error::InvalidConfig("source_train and target_val must be non-empty".into()));
    }
    let lexicon = config.load_lexicon()?;
    let attributor = config.attributor();
    let mut params = ModelParams::init(vocab.len(), config.dim, config.seed);
    let mut opt = AdamW::new(config.train, &params);
    let mut previous = SpuriousTokenSet::empty(0);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let penalized = match config.mode {
            RefineMode::Vanilla => BTreeSet::new(),
            RefineMode::TokMask | RefineMode::Reg => previous.combined(),
            RefineMode::Comb => combine_with_lexicon(&previous, &lexicon),
            RefineMode::PreDefOnly => lexicon.clone(),
        };

        let masked;
        let train_corpus = if config.mode == RefineMode::TokMask && !penalized.is_empty() {
            masked = apply_tok_mask(source_train, &penalized);
            &masked
        } else {
            source_train
        };
        let aux = AttributionLoss::new(vocab, &penalized, config.method, config.ig_steps);
        let loss = if config.mode.regularizes() && !aux.is_empty() {
            LossSpec::with_auxiliary(config.lambda, &aux)
        } else {
            LossSpec::classification_only()
        };
        let stats = train_epoch(&mut params, train_corpus, vocab, &loss, &mut opt, epoch_seed(config.seed, epoch))?;

        let extracted = if config.mode.extracts() {
            let ranking = global_ranking(&params, vocab, source_train, &attributor, &config.extraction, epoch)?;
            extract_spurious(&params, vocab, target_val, &ranking, &attributor, &config.extraction)?
        } else {
            SpuriousTokenSet::empty(epoch)
        };

        let target_f1 = score(&params, vocab, target_val)?;
        let source_f1 = source_val.map(|c| score(&params, vocab, c)).transpose()?;
        if best.as_ref().is_none_or(|b| target_f1 > b.0) {
            best = Some((target_f1, epoch, params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            penalized,
            extracted: extracted.clone(),
            train: stats,
            source_val_macro_f1: source_f1,
            target_val_macro_f1: target_f1,
        });
        previous = extracted;
    }

    let (_, selected_epoch, params) = best.expect("at least one epoch");
    Ok(RefineRun { config: config.clone(), history, selected_epoch, params })
}
