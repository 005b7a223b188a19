use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{self, Forward, ParamVars};
use super::{ModelParams, ParamGrads};
use crate::autodiff::{Tape, Var};
use crate::corpus::{Corpus, Instance, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay. The PAD embedding row is never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: TrainConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: TrainConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamW { config, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &ParamGrads) {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let dim = params.dim;

        let mut emb = vec![0.0; params.embeddings.len()];
        for (&id, row) in &grads.embeddings {
            emb[id * dim..(id + 1) * dim].copy_from_slice(row);
        }
        let dense = grads.dense();
        let grad_tensors: [&[f64]; 6] = [&emb, dense[0], dense[1], dense[2], dense[3], dense[4]];

        for (k, (p, g)) in params.tensors_mut().into_iter().zip(grad_tensors).enumerate() {
            let start = if k == 0 { dim } else { 0 };
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for j in start..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.epsilon);
                p[j] -= c.learning_rate * (update + c.weight_decay * p[j]);
            }
        }
    }
}

/// An extra differentiable term added to the classification loss.
pub trait AuxiliaryLoss: Sync {
    /// Builds this instance's contribution on `tape`, or `None` when the
    /// instance carries nothing to penalize.
    fn build(&self, tape: &mut Tape, pv: &ParamVars, forward: &Forward, ids: &[usize], instance_id: &str)
        -> Result<Option<Var>>;
}

#[derive(Clone, Copy)]
pub struct AuxiliaryTerm<'a> {
    pub lambda: f64,
    pub loss: &'a dyn AuxiliaryLoss,
}

/// Mean cross-entropy over the batch plus `lambda` times the summed
/// auxiliary term, when one is present.
#[derive(Clone, Copy, Default)]
pub struct LossSpec<'a> {
    pub auxiliary: Option<AuxiliaryTerm<'a>>,
}

impl<'a> LossSpec<'a> {
    pub fn classification_only() -> Self {
        LossSpec { auxiliary: None }
    }

    pub fn with_auxiliary(lambda: f64, loss: &'a dyn AuxiliaryLoss) -> Self {
        LossSpec { auxiliary: Some(AuxiliaryTerm { lambda, loss }) }
    }

    fn active(&self) -> Option<AuxiliaryTerm<'a>> {
        self.auxiliary.filter(|a| a.lambda != 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub instances: usize,
    pub batches: usize,
    /// Mean cross-entropy per instance.
    pub classification_loss: f64,
    /// Mean attribution loss per instance (before scaling by lambda).
    pub attribution_loss: f64,
}

struct InstanceGrad {
    ce: f64,
    aux: f64,
    grads: ParamGrads,
}

fn instance_grad(
    params: &ModelParams,
    ids: &[usize],
    inst: &Instance,
    batch_len: usize,
    aux: Option<AuxiliaryTerm<'_>>,
) -> Result<InstanceGrad> {
    let mut tape = Tape::new();
    let pv = ParamVars::new(&mut tape, params);
    let xs = params.embed(&mut tape, ids);
    let f = graph::forward(&mut tape, &pv, xs);
    let ce = graph::cross_entropy(&mut tape, f.logits, inst.label);
    let mut total = tape.scale(ce, 1.0 / batch_len as f64);
    let mut aux_value = 0.0;
    if let Some(term) = aux {
        if let Some(l) = term.loss.build(&mut tape, &pv, &f, ids, &inst.id)? {
            aux_value = tape.scalar(l);
            let scaled = tape.scale(l, term.lambda);
            total = tape.add(total, scaled);
        }
    }
    let g = tape.backward(total);
    Ok(InstanceGrad { ce: tape.scalar(ce), aux: aux_value, grads: ParamGrads::from_tape(&g, &pv, &f.xs, ids) })
}

/// One shuffled pass over `corpus`. Per-instance gradients are computed in
/// parallel and reduced in batch order, so results do not depend on the
/// thread count.
pub fn train_epoch(
    params: &mut ModelParams,
    corpus: &Corpus,
    vocab: &Vocabulary,
    loss: &LossSpec<'_>,
    opt: &mut AdamW,
    seed: u64,
) -> Result<EpochStats> {
    opt.config.validate()?;
    if let Some(inst) = corpus.instances.iter().find(|i| i.tokens.is_empty()) {
        return Err(Error::EmptyInstance(inst.id.clone()));
    }
    let encoded: Vec<Vec<usize>> = corpus.instances.iter().map(|i| vocab.encode(&i.tokens)).collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let aux = loss.active();
    let (mut ce_sum, mut aux_sum, mut batches) = (0.0, 0.0, 0);
    for (batch_idx, batch) in order.chunks(opt.config.batch_size).enumerate() {
        let snapshot: &ModelParams = params;
        let parts: Vec<InstanceGrad> = batch
            .par_iter()
            .map(|&i| instance_grad(snapshot, &encoded[i], &corpus.instances[i], batch.len(), aux))
            .collect::<Result<_>>()?;

        let mut grads = ParamGrads::zeros(params.dim);
        let (mut ce, mut at) = (0.0, 0.0);
        for p in &parts {
            ce += p.ce;
            at += p.aux;
            grads.add_assign(&p.grads);
        }
        if !ce.is_finite() {
            return Err(Error::NonFiniteLoss { what: "classification loss", batch: batch_idx });
        }
        if !at.is_finite() {
            return Err(Error::NonFiniteLoss { what: "attribution loss", batch: batch_idx });
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss { what: "gradient", batch: batch_idx });
        }
        opt.apply(params, &grads);
        ce_sum += ce;
        aux_sum += at;
        batches += 1;
    }
    let n = corpus.len().max(1) as f64;
    Ok(EpochStats {
        instances: corpus.len(),
        batches,
        classification_loss: ce_sum / n,
        attribution_loss: aux_sum / n,
    })
}
