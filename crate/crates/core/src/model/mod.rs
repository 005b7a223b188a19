//! Embedding table, additive-attention pooling and a linear two-class head.

pub mod graph;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::corpus::{Corpus, Instance, Label, Vocabulary, PAD_ID};
use crate::error::{Error, Result};

pub use train::{train_epoch, AdamW, AuxiliaryLoss, AuxiliaryTerm, EpochStats, LossSpec, TrainConfig};

pub const DEFAULT_DIM: usize = 16;
const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dim: usize,
    pub vocab_size: usize,
    /// `vocab_size x dim`, row-major. Row 0 (PAD) stays zero.
    pub embeddings: Vec<f64>,
    /// `dim x dim`, row-major.
    pub attn_proj: Vec<f64>,
    pub attn_bias: Vec<f64>,
    pub attn_query: Vec<f64>,
    /// `2 x dim`, row-major; row 0 scores hate.
    pub head_weights: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl ModelParams {
    /// Uniform(-0.1, 0.1) initialization with a zero PAD row.
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect() };
        let mut embeddings = draw(vocab_size * dim);
        embeddings[..dim].fill(0.0);
        ModelParams {
            dim,
            vocab_size,
            embeddings,
            attn_proj: draw(dim * dim),
            attn_bias: draw(dim),
            attn_query: draw(dim),
            head_weights: draw(2 * dim),
            head_bias: draw(2),
        }
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        &self.embeddings[id * self.dim..(id + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        let shapes = [
            (self.embeddings.len(), self.vocab_size * d, "embeddings"),
            (self.attn_proj.len(), d * d, "attn_proj"),
            (self.attn_bias.len(), d, "attn_bias"),
            (self.attn_query.len(), d, "attn_query"),
            (self.head_weights.len(), 2 * d, "head_weights"),
            (self.head_bias.len(), 2, "head_bias"),
        ];
        if d == 0 {
            return Err(Error::InvalidConfig("dim must be at least 1".into()));
        }
        for (got, want, name) in shapes {
            if got != want {
                return Err(Error::InvalidConfig(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        if self.embeddings[..d].iter().any(|x| *x != 0.0) {
            return Err(Error::InvalidConfig("PAD embedding must be zero".into()));
        }
        Ok(())
    }

    pub(crate) fn tensors(&self) -> [&Vec<f64>; 6] {
        [
            &self.embeddings,
            &self.attn_proj,
            &self.attn_bias,
            &self.attn_query,
            &self.head_weights,
            &self.head_bias,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.embeddings,
            &mut self.attn_proj,
            &mut self.attn_bias,
            &mut self.attn_query,
            &mut self.head_weights,
            &mut self.head_bias,
        ]
    }

    /// Embedding leaves, one per position.
    pub(crate) fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Vec<Var> {
        ids.iter().map(|&id| tape.leaf(self.embedding(id).to_vec())).collect()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.vocab_size) {
            Some(id) => Err(Error::InvalidRequest(format!("token id {id} outside vocabulary of {}", self.vocab_size))),
            None => Ok(()),
        }
    }
}

/// Parameter gradients. Embedding rows are stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub embeddings: BTreeMap<usize, Vec<f64>>,
    pub attn_proj: Vec<f64>,
    pub attn_bias: Vec<f64>,
    pub attn_query: Vec<f64>,
    pub head_weights: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(dim: usize) -> Self {
        ParamGrads {
            embeddings: BTreeMap::new(),
            attn_proj: vec![0.0; dim * dim],
            attn_bias: vec![0.0; dim],
            attn_query: vec![0.0; dim],
            head_weights: vec![0.0; 2 * dim],
            head_bias: vec![0.0; 2],
        }
    }

    /// Collects leaf gradients; `xs[i]` is the embedding leaf of `ids[i]`.
    pub(crate) fn from_tape(g: &Gradients, pv: &graph::ParamVars, xs: &[Var], ids: &[usize]) -> Self {
        let d = pv.dim;
        let mut out = ParamGrads {
            embeddings: BTreeMap::new(),
            attn_proj: g.get_or_zeros(pv.proj, d * d),
            attn_bias: g.get_or_zeros(pv.bias, d),
            attn_query: g.get_or_zeros(pv.query, d),
            head_weights: g.get_or_zeros(pv.head_w, 2 * d),
            head_bias: g.get_or_zeros(pv.head_b, 2),
        };
        for (&x, &id) in xs.iter().zip(ids) {
            if id == PAD_ID {
                continue;
            }
            if let Some(gx) = g.get(x) {
                let row = out.embeddings.entry(id).or_insert_with(|| vec![0.0; d]);
                for (r, v) in row.iter_mut().zip(gx) {
                    *r += v;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (id, row) in &other.embeddings {
            let mine = self.embeddings.entry(*id).or_insert_with(|| vec![0.0; row.len()]);
            for (a, b) in mine.iter_mut().zip(row) {
                *a += b;
            }
        }
        for (a, b) in self.dense_mut().into_iter().zip(other.dense()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub(crate) fn dense(&self) -> [&Vec<f64>; 5] {
        [&self.attn_proj, &self.attn_bias, &self.attn_query, &self.head_weights, &self.head_bias]
    }

    fn dense_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.attn_proj,
            &mut self.attn_bias,
            &mut self.attn_query,
            &mut self.head_weights,
            &mut self.head_bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.values().chain(self.dense()).all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.embeddings.values().chain(self.dense()).all(|t| t.iter().all(|x| *x == 0.0))
    }

    /// Dense embedding gradient for row `id`.
    pub fn embedding_row(&self, id: usize, dim: usize) -> Vec<f64> {
        self.embeddings.get(&id).cloned().unwrap_or_else(|| vec![0.0; dim])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Input ids, PAD included.
    pub token_ids: Vec<usize>,
    /// Indices into `token_ids` of the non-PAD tokens the model attends to.
    pub positions: Vec<usize>,
    pub token_embeddings: Vec<Vec<f64>>,
    pub attention_weights: Vec<f64>,
    pub logits: [f64; 2],
    pub class_probabilities: [f64; 2],
    pub predicted_class: Label,
    pub gold: Option<Label>,
}

/// Argmax over the two logits; ties go to non-hate.
pub fn argmax_class(logits: [f64; 2]) -> Label {
    if logits[Label::Hate.index()] > logits[Label::NonHate.index()] {
        Label::Hate
    } else {
        Label::NonHate
    }
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

fn non_pad(ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    ids.iter().enumerate().filter(|(_, &id)| id != PAD_ID).map(|(p, &id)| (p, id)).unzip()
}

/// Forward pass over encoded ids. PAD positions are skipped.
pub fn forward_ids(params: &ModelParams, ids: &[usize], gold: Option<Label>) -> Result<ForwardTrace> {
    params.check_ids(ids)?;
    let (positions, active) = non_pad(ids);
    if active.is_empty() {
        return Err(Error::EmptyInstance(String::new()));
    }
    let mut tape = Tape::new();
    let pv = graph::ParamVars::new(&mut tape, params);
    let xs = params.embed(&mut tape, &active);
    let f = graph::forward(&mut tape, &pv, xs);
    let z = tape.value(f.logits);
    let logits = [z[0], z[1]];
    Ok(ForwardTrace {
        token_ids: ids.to_vec(),
        positions,
        token_embeddings: active.iter().map(|&id| params.embedding(id).to_vec()).collect(),
        attention_weights: tape.value(f.attention.alpha).to_vec(),
        logits,
        class_probabilities: softmax2(logits),
        predicted_class: argmax_class(logits),
        gold,
    })
}

pub fn forward(params: &ModelParams, vocab: &Vocabulary, instance: &Instance) -> Result<ForwardTrace> {
    if instance.tokens.is_empty() {
        return Err(Error::EmptyInstance(instance.id.clone()));
    }
    forward_ids(params, &vocab.encode(&instance.tokens), Some(instance.label))
        .map_err(|e| match e {
            Error::EmptyInstance(_) => Error::EmptyInstance(instance.id.clone()),
            other => other,
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarTarget {
    Logit(Label),
    Probability(Label),
    /// Cross-entropy against the trace's gold label.
    Loss,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Embeddings,
    /// Attention weights taken as free variables at their forward values.
    AttentionWeights,
    Parameters,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientRequest {
    pub scalar_target: ScalarTarget,
    pub wrt: Wrt,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradientValue {
    /// One row per input position; PAD rows are zero.
    Embeddings(Vec<Vec<f64>>),
    AttentionWeights(Vec<f64>),
    Parameters(ParamGrads),
}

fn scalar_from_logits(tape: &mut Tape, logits: Var, target: ScalarTarget, gold: Option<Label>) -> Result<Var> {
    Ok(match target {
        ScalarTarget::Logit(c) => tape.index(logits, c.index()),
        ScalarTarget::Probability(c) => {
            let lse = graph::log_sum_exp(tape, logits);
            let zc = tape.index(logits, c.index());
            let lp = tape.sub(zc, lse);
            tape.exp(lp)
        }
        ScalarTarget::Loss => {
            let gold = gold.ok_or_else(|| {
                Error::InvalidRequest("loss requested but the trace has no gold label".into())
            })?;
            graph::cross_entropy(tape, logits, gold)
        }
        ScalarTarget::Constant(c) => tape.constant_scalar(c),
    })
}

/// Exact reverse-mode derivative of a scalar of the forward pass.
pub fn gradient(params: &ModelParams, trace: &ForwardTrace, request: GradientRequest) -> Result<GradientValue> {
    params.check_ids(&trace.token_ids)?;
    let active: Vec<usize> = trace.positions.iter().map(|&p| trace.token_ids[p]).collect();
    if active.is_empty() || trace.attention_weights.len() != active.len() {
        return Err(Error::InvalidRequest("trace does not match its token ids".into()));
    }
    let mut tape = Tape::new();
    let pv = graph::ParamVars::new(&mut tape, params);
    let xs = params.embed(&mut tape, &active);

    let (logits, alpha_leaf) = if request.wrt == Wrt::AttentionWeights {
        let alpha = tape.leaf(trace.attention_weights.clone());
        let h = graph::pool(&mut tape, alpha, &xs);
        (graph::head(&mut tape, &pv, h), Some(alpha))
    } else {
        (graph::forward(&mut tape, &pv, xs.clone()).logits, None)
    };
    let out = scalar_from_logits(&mut tape, logits, request.scalar_target, trace.gold)?;
    let g = tape.backward(out);
    let d = params.dim;

    Ok(match request.wrt {
        Wrt::Embeddings => {
            let mut rows = vec![vec![0.0; d]; trace.token_ids.len()];
            for (&p, &x) in trace.positions.iter().zip(&xs) {
                rows[p] = g.get_or_zeros(x, d);
            }
            GradientValue::Embeddings(rows)
        }
        Wrt::AttentionWeights => GradientValue::AttentionWeights(g.get_or_zeros(alpha_leaf.unwrap(), active.len())),
        Wrt::Parameters => GradientValue::Parameters(ParamGrads::from_tape(&g, &pv, &xs, &active)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted: Label,
    /// `[p(hate), p(non-hate)]`
    pub probabilities: [f64; 2],
}

/// Predictions for every instance, in corpus order.
pub fn predict(params: &ModelParams, vocab: &Vocabulary, corpus: &Corpus) -> Result<Vec<Prediction>> {
    use rayon::prelude::*;
    corpus
        .instances
        .par_iter()
        .map(|inst| {
            let t = forward(params, vocab, inst)?;
            Ok(Prediction { id: inst.id.clone(), predicted: t.predicted_class, probabilities: t.class_probabilities })
        })
        .collect()
}

const CHECKPOINT_FORMAT: &str = "dref-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    dim: usize,
    vocab_hash: String,
    params: ModelParams,
}

pub fn save_checkpoint(params: &ModelParams, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        dim: params.dim,
        vocab_hash: vocab.hash(),
        params: params.clone(),
    };
    std::fs::write(path, serde_json::to_string(&ck)?).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks it against `vocab`.
pub fn load_checkpoint(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::InvalidConfig(format!("unknown checkpoint format {:?}", ck.format)));
    }
    let expected = vocab.hash();
    if ck.vocab_hash != expected {
        return Err(Error::VocabularyMismatch { expected, found: ck.vocab_hash });
    }
    if ck.dim != ck.params.dim || ck.params.vocab_size != vocab.len() {
        return Err(Error::InvalidConfig("checkpoint shape does not match its header".into()));
    }
    ck.params.validate()?;
    Ok(ck.params)
}

#[cfg(test)]
mod tests;
