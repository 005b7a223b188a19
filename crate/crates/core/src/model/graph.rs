//! Tape builders for the classifier.
//!
//! Per token `x_i`: `a_i = W x_i + b`, `g_i = tanh(a_i)`, `s_i = q . g_i`.
//! Attention `alpha = softmax(s)`, pooled `h = sum_i alpha_i x_i`, logits
//! `z = C h + c`.

use super::ModelParams;
use crate::autodiff::{Tape, Var};
use crate::corpus::Label;

/// Parameter leaves (embeddings are registered per position by callers).
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub proj: Var,
    pub bias: Var,
    pub query: Var,
    pub head_w: Var,
    pub head_b: Var,
    pub dim: usize,
}

impl ParamVars {
    pub fn new(tape: &mut Tape, p: &ModelParams) -> Self {
        ParamVars {
            proj: tape.leaf(p.attn_proj.clone()),
            bias: tape.leaf(p.attn_bias.clone()),
            query: tape.leaf(p.attn_query.clone()),
            head_w: tape.leaf(p.head_weights.clone()),
            head_b: tape.leaf(p.head_bias.clone()),
            dim: p.dim,
        }
    }

    /// Row of the head matrix for `class`.
    pub fn class_weights(&self, tape: &mut Tape, class: Label) -> Var {
        tape.slice(self.head_w, class.index() * self.dim, self.dim)
    }

    pub fn class_bias(&self, tape: &mut Tape, class: Label) -> Var {
        tape.index(self.head_b, class.index())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TokenProjection {
    pub pre: Var,
    pub hidden: Var,
    pub score: Var,
}

pub fn project(tape: &mut Tape, pv: &ParamVars, x: Var) -> TokenProjection {
    let wx = tape.matvec(pv.proj, x, pv.dim, pv.dim);
    let pre = tape.add(wx, pv.bias);
    let hidden = tape.tanh(pre);
    let score = tape.dot(pv.query, hidden);
    TokenProjection { pre, hidden, score }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub tokens: Vec<TokenProjection>,
    pub scores: Var,
    /// `exp(s - shift)`
    pub exp: Var,
    pub total: Var,
    pub recip: Var,
    pub alpha: Var,
    pub shift: f64,
}

/// Max of a node's values; used as the constant softmax shift.
pub fn max_value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Token scores for every position.
pub fn scores(tape: &mut Tape, pv: &ParamVars, xs: &[Var]) -> (Vec<TokenProjection>, Var) {
    let tokens: Vec<TokenProjection> = xs.iter().map(|&x| project(tape, pv, x)).collect();
    let scores = tape.stack(tokens.iter().map(|t| t.score).collect());
    (tokens, scores)
}

/// Softmax over precomputed scores with a constant shift.
pub fn softmax(tape: &mut Tape, tokens: Vec<TokenProjection>, scores: Var, shift: f64) -> Attention {
    let shifted = tape.add_const(scores, -shift);
    let exp = tape.exp(shifted);
    let total = tape.sum(exp);
    let recip = tape.recip(total);
    let alpha = tape.mul_scalar(exp, recip);
    Attention { tokens, scores, exp, total, recip, alpha, shift }
}

pub fn pool(tape: &mut Tape, alpha: Var, xs: &[Var]) -> Var {
    let parts: Vec<Var> = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let a = tape.index(alpha, i);
            tape.mul_scalar(x, a)
        })
        .collect();
    tape.add_all(&parts)
}

pub fn head(tape: &mut Tape, pv: &ParamVars, pooled: Var) -> Var {
    let cz = tape.matvec(pv.head_w, pooled, 2, pv.dim);
    tape.add(cz, pv.head_b)
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub xs: Vec<Var>,
    pub attention: Attention,
    pub pooled: Var,
    pub logits: Var,
}

pub fn forward(tape: &mut Tape, pv: &ParamVars, xs: Vec<Var>) -> Forward {
    let (tokens, s) = scores(tape, pv, &xs);
    let shift = max_value(tape, s);
    let attention = softmax(tape, tokens, s, shift);
    let pooled = pool(tape, attention.alpha, &xs);
    let logits = head(tape, pv, pooled);
    Forward { xs, attention, pooled, logits }
}

/// `logsumexp(z) - z_gold`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, gold: Label) -> Var {
    let lse = log_sum_exp(tape, logits);
    let zg = tape.index(logits, gold.index());
    tape.sub(lse, zg)
}

pub fn log_sum_exp(tape: &mut Tape, logits: Var) -> Var {
    let m = max_value(tape, logits);
    let shifted = tape.add_const(logits, -m);
    let e = tape.exp(shifted);
    let s = tape.sum(e);
    let l = tape.ln(s);
    tape.add_const(l, m)
}

/// Logit of `class` minus its bias: `sum_i alpha_i (w_c . x_i)`.
pub fn class_value(tape: &mut Tape, pv: &ParamVars, f: &Forward, class: Label) -> Var {
    let z = tape.index(f.logits, class.index());
    let b = pv.class_bias(tape, class);
    tape.sub(z, b)
}

/// Analytic gradient of the `class` logit with respect to each token
/// embedding, as tape nodes (so it can itself be differentiated):
///
/// `dz/dx_j = alpha_j w + alpha_j (v_j - zbar) W^T (q * (1 - g_j^2))`
/// with `v_j = w . x_j` and `zbar = sum_i alpha_i v_i`.
pub fn input_gradients(tape: &mut Tape, pv: &ParamVars, f: &Forward, class: Label) -> Vec<Var> {
    let w = pv.class_weights(tape, class);
    let values: Vec<Var> = f.xs.iter().map(|&x| tape.dot(w, x)).collect();
    let v = tape.stack(values.clone());
    let zbar = tape.dot(f.attention.alpha, v);
    let mut out = Vec::with_capacity(f.xs.len());
    for (j, tok) in f.attention.tokens.iter().enumerate() {
        let alpha_j = tape.index(f.attention.alpha, j);
        let g2 = tape.square(tok.hidden);
        let neg = tape.scale(g2, -1.0);
        let one_minus = tape.add_const(neg, 1.0);
        let t = tape.mul(pv.query, one_minus);
        let u = tape.mat_t_vec(pv.proj, t, pv.dim, pv.dim);
        let centered = tape.sub(values[j], zbar);
        let coef = tape.mul(alpha_j, centered);
        let direct = tape.mul_scalar(w, alpha_j);
        let through_attention = tape.mul_scalar(u, coef);
        out.push(tape.add(direct, through_attention));
    }
    out
}
