//! Per-token attribution scores: scaled attention, integrated gradients and
//! DeepLIFT.
//!
//! Every method explains the logit of a target class and is expressed as
//! nodes on an autodiff tape. Reading the node values gives the attribution
//! record; differentiating them gives the gradient of an attribution penalty
//! with respect to the model parameters.
//!
//! DeepLIFT propagates multipliers backward through the classifier. Linear
//! maps use the linear rule. `tanh`, `exp` and the softmax normalizer
//! `1/U` use the rescale rule, whose multiplier is the secant slope
//! `(f(a) - f(a0)) / (a - a0)`. The two products in the network
//! (`alpha_i = u_i * r` and `p_i = alpha_i * x_i`) are split with
//! `d(ab) = mean(b) da + mean(a) db`, where the means are taken over the
//! actual and reference activations. Each of these steps is an exact
//! identity on differences, so contributions always sum to the logit delta.

use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Nonlinearity, Tape, Var};
use crate::corpus::{Instance, Label, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::model::graph::{self, Forward, ParamVars};
use crate::model::{argmax_class, ModelParams};

pub const DEFAULT_IG_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttributionMethod {
    #[serde(rename = "scaled_attention")]
    ScaledAttention,
    #[serde(rename = "integrated_gradients", alias = "ig")]
    IntegratedGradients,
    #[serde(rename = "deeplift")]
    DeepLift,
}

impl AttributionMethod {
    pub const ALL: [AttributionMethod; 3] =
        [AttributionMethod::ScaledAttention, AttributionMethod::IntegratedGradients, AttributionMethod::DeepLift];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributionMethod::ScaledAttention => "scaled_attention",
            AttributionMethod::IntegratedGradients => "integrated_gradients",
            AttributionMethod::DeepLift => "deeplift",
        }
    }
}

impl FromStr for AttributionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled_attention" => Ok(AttributionMethod::ScaledAttention),
            "ig" | "integrated_gradients" => Ok(AttributionMethod::IntegratedGradients),
            "deeplift" => Ok(AttributionMethod::DeepLift),
            other => Err(Error::InvalidConfig(format!("unknown attribution method {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub instance_id: String,
    pub method: AttributionMethod,
    pub target_class: Label,
    pub tokens: Vec<String>,
    pub raw_scores: Vec<f64>,
    /// Sigmoid of `raw_scores`; empty until [`normalize_local`] runs.
    pub normalized_scores: Vec<f64>,
}

/// Reference embeddings, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineInput {
    pub embeddings: Vec<Vec<f64>>,
}

impl BaselineInput {
    pub fn zeros(tokens: usize, dim: usize) -> Self {
        BaselineInput { embeddings: vec![vec![0.0; dim]; tokens] }
    }

    fn check(&self, tokens: usize, dim: usize) -> Result<()> {
        if self.embeddings.len() != tokens || self.embeddings.iter().any(|r| r.len() != dim) {
            return Err(Error::LengthMismatch(format!(
                "baseline must be {tokens} rows of {dim} values"
            )));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fills `normalized_scores` with the sigmoid of each raw score.
pub fn normalize_local(mut record: AttributionRecord) -> Result<AttributionRecord> {
    if let Some(position) = record.raw_scores.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteAttribution { id: record.instance_id, position });
    }
    record.normalized_scores = record.raw_scores.iter().map(|&x| sigmoid(x)).collect();
    Ok(record)
}

// ---------------------------------------------------------------------------
// Tape builders

/// `alpha_i * (w_c . x_i)`: each attention weight times the derivative of the
/// class logit with respect to that weight, holding the others fixed.
pub(crate) fn scaled_attention_nodes(tape: &mut Tape, pv: &ParamVars, f: &Forward, class: Label) -> Vec<Var> {
    let w = pv.class_weights(tape, class);
    (0..f.xs.len())
        .map(|i| {
            let a = tape.index(f.attention.alpha, i);
            let g = tape.dot(w, f.xs[i]);
            tape.mul(a, g)
        })
        .collect()
}

/// Per-dimension integrated gradients with the midpoint rule. Interpolation
/// points enter the tape as constants; only the path-length factor and the
/// gradients at those points depend on the parameters.
pub(crate) fn integrated_gradient_nodes(
    tape: &mut Tape,
    pv: &ParamVars,
    xs: &[Var],
    baseline: &[Vec<f64>],
    class: Label,
    steps: usize,
) -> Result<Vec<Var>> {
    if steps == 0 {
        return Err(Error::ZeroSteps);
    }
    let actual: Vec<Vec<f64>> = xs.iter().map(|&x| tape.value(x).to_vec()).collect();
    let mut acc: Vec<Option<Var>> = vec![None; xs.len()];
    for k in 0..steps {
        let t = (k as f64 + 0.5) / steps as f64;
        let points: Vec<Var> = actual
            .iter()
            .zip(baseline)
            .map(|(x, x0)| tape.leaf(x.iter().zip(x0).map(|(a, b)| b + t * (a - b)).collect()))
            .collect();
        let fk = graph::forward(tape, pv, points);
        for (slot, g) in acc.iter_mut().zip(graph::input_gradients(tape, pv, &fk, class)) {
            *slot = Some(match *slot {
                Some(prev) => tape.add(prev, g),
                None => g,
            });
        }
    }
    Ok(acc
        .into_iter()
        .zip(xs.iter().zip(baseline))
        .map(|(sum, (&x, x0))| {
            let mean = tape.scale(sum.expect("steps >= 1"), 1.0 / steps as f64);
            let r = tape.leaf(x0.clone());
            let dx = tape.sub(x, r);
            tape.mul(dx, mean)
        })
        .collect())
}

fn midpoint(tape: &mut Tape, a: Var, b: Var) -> Var {
    let s = tape.add(a, b);
    tape.scale(s, 0.5)
}

/// Per-dimension DeepLIFT contributions to the class logit.
pub(crate) fn deeplift_nodes(
    tape: &mut Tape,
    pv: &ParamVars,
    f: &Forward,
    baseline: &[Vec<f64>],
    class: Label,
) -> Vec<Var> {
    let d = pv.dim;
    let refs: Vec<Var> = baseline.iter().map(|b| tape.leaf(b.clone())).collect();
    let (ref_tokens, ref_scores) = graph::scores(tape, pv, &refs);
    // One shift for both passes keeps u and u0 on the same scale.
    let shift = graph::max_value(tape, f.attention.scores).max(graph::max_value(tape, ref_scores));
    let act = graph::softmax(tape, f.attention.tokens.clone(), f.attention.scores, shift);
    let rf = graph::softmax(tape, ref_tokens, ref_scores, shift);
    let w = pv.class_weights(tape, class);
    let r_bar = midpoint(tape, act.recip, rf.recip);

    let n = f.xs.len();
    let mut direct = Vec::with_capacity(n);
    let mut m_u = Vec::with_capacity(n);
    let mut m_r_parts = Vec::with_capacity(n);
    for (i, &reference) in refs.iter().enumerate() {
        let alpha = tape.index(act.alpha, i);
        let alpha0 = tape.index(rf.alpha, i);
        let alpha_bar = midpoint(tape, alpha, alpha0);
        direct.push(tape.mul_scalar(w, alpha_bar));

        let x_bar = midpoint(tape, f.xs[i], reference);
        let m_alpha = tape.dot(w, x_bar);
        let u = tape.index(act.exp, i);
        let u0 = tape.index(rf.exp, i);
        let u_bar = midpoint(tape, u, u0);
        m_u.push(tape.mul(m_alpha, r_bar));
        m_r_parts.push(tape.mul(m_alpha, u_bar));
    }
    let m_r = tape.add_all(&m_r_parts);
    let recip_slope = tape.secant(Nonlinearity::Recip, act.total, rf.total);
    let m_total = tape.mul(m_r, recip_slope);

    let s = tape.add_const(f.attention.scores, -shift);
    let s0 = tape.add_const(ref_scores, -shift);
    let exp_slope = tape.secant(Nonlinearity::Exp, s, s0);

    (0..n)
        .map(|j| {
            let m_uj = tape.add(m_u[j], m_total);
            let slope_j = tape.index(exp_slope, j);
            let m_s = tape.mul(m_uj, slope_j);
            let m_g = tape.mul_scalar(pv.query, m_s);
            let tanh_slope = tape.secant(Nonlinearity::Tanh, act.tokens[j].pre, rf.tokens[j].pre);
            let m_a = tape.mul(m_g, tanh_slope);
            let back = tape.mat_t_vec(pv.proj, m_a, d, d);
            let m_x = tape.add(direct[j], back);
            let dx = tape.sub(f.xs[j], refs[j]);
            tape.mul(m_x, dx)
        })
        .collect()
}

/// Per-token attribution nodes toward `class` with an all-zero baseline.
pub(crate) fn token_score_nodes(
    tape: &mut Tape,
    pv: &ParamVars,
    f: &Forward,
    method: AttributionMethod,
    class: Label,
    ig_steps: usize,
) -> Result<Vec<Var>> {
    let zeros = BaselineInput::zeros(f.xs.len(), pv.dim).embeddings;
    let per_dim = match method {
        AttributionMethod::ScaledAttention => return Ok(scaled_attention_nodes(tape, pv, f, class)),
        AttributionMethod::IntegratedGradients => {
            integrated_gradient_nodes(tape, pv, &f.xs, &zeros, class, ig_steps)?
        }
        AttributionMethod::DeepLift => deeplift_nodes(tape, pv, f, &zeros, class),
    };
    Ok(per_dim.into_iter().map(|v| tape.sum(v)).collect())
}

// ---------------------------------------------------------------------------
// Numeric entry points

/// Which class an explanation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Class(Label),
    Predicted,
}

fn check_ids(ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::EmptyInstance(String::new()));
    }
    if ids.contains(&PAD_ID) {
        return Err(Error::InvalidRequest("padding cannot be attributed".into()));
    }
    Ok(())
}

/// Per-dimension attributions of the target logit for an encoded instance.
/// Scaled attention has no per-dimension form; its rows hold one value.
pub fn per_dimension(
    params: &ModelParams,
    ids: &[usize],
    method: AttributionMethod,
    target: Target,
    baseline: Option<&BaselineInput>,
    ig_steps: usize,
) -> Result<(Label, Vec<Vec<f64>>)> {
    check_ids(ids)?;
    let zero;
    let baseline = match baseline {
        Some(b) => b,
        None => {
            zero = BaselineInput::zeros(ids.len(), params.dim);
            &zero
        }
    };
    baseline.check(ids.len(), params.dim)?;
    if let Some(&bad) = ids.iter().find(|&&id| id >= params.vocab_size) {
        return Err(Error::InvalidRequest(format!("token id {bad} outside vocabulary")));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::new(&mut tape, params);
    let xs = params.embed(&mut tape, ids);
    let f = graph::forward(&mut tape, &pv, xs);
    let class = match target {
        Target::Class(c) => c,
        Target::Predicted => {
            let z = tape.value(f.logits);
            argmax_class([z[0], z[1]])
        }
    };
    let nodes = match method {
        AttributionMethod::ScaledAttention => scaled_attention_nodes(&mut tape, &pv, &f, class),
        AttributionMethod::IntegratedGradients => {
            integrated_gradient_nodes(&mut tape, &pv, &f.xs, &baseline.embeddings, class, ig_steps)?
        }
        AttributionMethod::DeepLift => deeplift_nodes(&mut tape, &pv, &f, &baseline.embeddings, class),
    };
    Ok((class, nodes.into_iter().map(|v| tape.value(v).to_vec()).collect()))
}

/// Explains instances with one method; records come back normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attributor {
    pub method: AttributionMethod,
    pub ig_steps: usize,
}

impl Attributor {
    pub fn new(method: AttributionMethod) -> Self {
        Attributor { method, ig_steps: DEFAULT_IG_STEPS }
    }

    pub fn explain(
        &self,
        params: &ModelParams,
        vocab: &Vocabulary,
        instance: &Instance,
        target: Target,
    ) -> Result<AttributionRecord> {
        self.explain_with_baseline(params, vocab, instance, target, None)
    }

    pub fn explain_with_baseline(
        &self,
        params: &ModelParams,
        vocab: &Vocabulary,
        instance: &Instance,
        target: Target,
        baseline: Option<&BaselineInput>,
    ) -> Result<AttributionRecord> {
        let ids = vocab.encode(&instance.tokens);
        let (class, rows) = per_dimension(params, &ids, self.method, target, baseline, self.ig_steps)
            .map_err(|e| match e {
                Error::EmptyInstance(_) => Error::EmptyInstance(instance.id.clone()),
                other => other,
            })?;
        normalize_local(AttributionRecord {
            instance_id: instance.id.clone(),
            method: self.method,
            target_class: class,
            tokens: instance.tokens.clone(),
            raw_scores: rows.iter().map(|r| r.iter().sum()).collect(),
            normalized_scores: Vec::new(),
        })
    }
}

pub fn scaled_attention(
    params: &ModelParams,
    vocab: &Vocabulary,
    instance: &Instance,
    target_class: Label,
) -> Result<AttributionRecord> {
    Attributor::new(AttributionMethod::ScaledAttention).explain(params, vocab, instance, Target::Class(target_class))
}

pub fn integrated_gradients(
    params: &ModelParams,
    vocab: &Vocabulary,
    instance: &Instance,
    target_class: Label,
    baseline: &BaselineInput,
    steps: usize,
) -> Result<AttributionRecord> {
    Attributor { method: AttributionMethod::IntegratedGradients, ig_steps: steps }.explain_with_baseline(
        params,
        vocab,
        instance,
        Target::Class(target_class),
        Some(baseline),
    )
}

pub fn deeplift(
    params: &ModelParams,
    vocab: &Vocabulary,
    instance: &Instance,
    target_class: Label,
    baseline: &BaselineInput,
) -> Result<AttributionRecord> {
    Attributor::new(AttributionMethod::DeepLift).explain_with_baseline(
        params,
        vocab,
        instance,
        Target::Class(target_class),
        Some(baseline),
    )
}

/// Writes one JSON record per line.
pub fn write_attribution_dump(path: impl AsRef<Path>, records: &[AttributionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_ids, gradient, GradientRequest, GradientValue, ScalarTarget, Wrt};
    use proptest::prelude::*;

    fn params(vocab: usize, dim: usize, seed: u64, scale: f64) -> ModelParams {
        let mut p = ModelParams::init(vocab, dim, seed);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= scale);
        }
        p
    }

    fn logit_with_embeddings(p: &ModelParams, rows: &[Vec<f64>], class: Label) -> f64 {
        // Independent forward pass over explicit embedding rows.
        let d = p.dim;
        let scores: Vec<f64> = rows
            .iter()
            .map(|x| {
                (0..d)
                    .map(|r| {
                        let a: f64 = (0..d).map(|c| p.attn_proj[r * d + c] * x[c]).sum::<f64>() + p.attn_bias[r];
                        p.attn_query[r] * a.tanh()
                    })
                    .sum()
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let w = &p.head_weights[class.index() * d..(class.index() + 1) * d];
        let mut out = p.head_bias[class.index()];
        for (x, ei) in rows.iter().zip(&e) {
            out += ei / z * x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-3.0) - 0.047426).abs() < 1e-6);
    }

    #[test]
    fn normalization_rejects_non_finite_and_keeps_order() {
        let rec = AttributionRecord {
            instance_id: "x".into(),
            method: AttributionMethod::DeepLift,
            target_class: Label::Hate,
            tokens: vec!["a".into(), "b".into(), "c".into()],
            raw_scores: vec![0.3, -2.0, 5.0],
            normalized_scores: vec![],
        };
        let n = normalize_local(rec.clone()).unwrap();
        assert!(n.normalized_scores[2] > n.normalized_scores[0] && n.normalized_scores[0] > n.normalized_scores[1]);
        let mut bad = rec;
        bad.raw_scores[1] = f64::NAN;
        assert!(matches!(normalize_local(bad), Err(Error::NonFiniteAttribution { position: 1, .. })));
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("ig".parse::<AttributionMethod>().unwrap(), AttributionMethod::IntegratedGradients);
        assert_eq!("deeplift".parse::<AttributionMethod>().unwrap(), AttributionMethod::DeepLift);
        assert!("occlusion".parse::<AttributionMethod>().is_err());
        let json = serde_json::to_string(&AttributionMethod::IntegratedGradients).unwrap();
        assert_eq!(json, "\"integrated_gradients\"");
        assert_eq!(serde_json::from_str::<AttributionMethod>("\"ig\"").unwrap(), AttributionMethod::IntegratedGradients);
    }

    #[test]
    fn zero_head_gives_zero_scaled_attention() {
        let mut p = params(12, 8, 3, 5.0);
        p.head_weights.iter_mut().for_each(|x| *x = 0.0);
        let (_, rows) = per_dimension(&p, &[3, 4, 5], AttributionMethod::ScaledAttention, Target::Class(Label::Hate), None, 1).unwrap();
        assert!(rows.iter().all(|r| r == &vec![0.0]));
    }

    #[test]
    fn scaled_attention_matches_attention_gradient() {
        let p = params(20, 8, 7, 8.0);
        let ids = [3, 9, 4, 12, 7];
        let t = forward_ids(&p, &ids, None).unwrap();
        let req = GradientRequest { scalar_target: ScalarTarget::Logit(Label::NonHate), wrt: Wrt::AttentionWeights };
        let GradientValue::AttentionWeights(g) = gradient(&p, &t, req).unwrap() else { panic!() };
        let (_, rows) = per_dimension(&p, &ids, AttributionMethod::ScaledAttention, Target::Class(Label::NonHate), None, 1).unwrap();
        for i in 0..ids.len() {
            assert!((rows[i][0] - t.attention_weights[i] * g[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_scaled_attention_is_the_gradient() {
        let p = params(20, 8, 7, 8.0);
        let (_, rows) = per_dimension(&p, &[5], AttributionMethod::ScaledAttention, Target::Class(Label::Hate), None, 1).unwrap();
        let w = &p.head_weights[..8];
        let expected: f64 = w.iter().zip(p.embedding(5)).map(|(a, b)| a * b).sum();
        assert!((rows[0][0] - expected).abs() < 1e-12);
    }

    #[test]
    fn baseline_equal_to_input_gives_zero() {
        let p = params(20, 8, 2, 6.0);
        let ids = [3, 4, 5];
        let base = BaselineInput { embeddings: ids.iter().map(|&i| p.embedding(i).to_vec()).collect() };
        for method in [AttributionMethod::IntegratedGradients, AttributionMethod::DeepLift] {
            let (_, rows) = per_dimension(&p, &ids, method, Target::Class(Label::Hate), Some(&base), 8).unwrap();
            assert!(rows.iter().flatten().all(|x| *x == 0.0), "{method}");
        }
    }

    #[test]
    fn ig_requires_steps() {
        let p = params(20, 4, 2, 1.0);
        let r = per_dimension(&p, &[3], AttributionMethod::IntegratedGradients, Target::Predicted, None, 0);
        assert!(matches!(r, Err(Error::ZeroSteps)));
    }

    #[test]
    fn baseline_shape_is_checked() {
        let p = params(20, 4, 2, 1.0);
        let base = BaselineInput::zeros(2, 4);
        let r = per_dimension(&p, &[3], AttributionMethod::DeepLift, Target::Predicted, Some(&base), 1);
        assert!(matches!(r, Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn linear_model_closed_form() {
        let mut p = params(20, 8, 5, 10.0);
        p.attn_query.iter_mut().for_each(|x| *x = 0.0);
        let ids = [3, 7, 11, 4];
        let n = ids.len() as f64;
        for class in Label::ALL {
            let w = &p.head_weights[class.index() * 8..(class.index() + 1) * 8];
            for steps in [1, 3, 50] {
                let (_, ig) = per_dimension(&p, &ids, AttributionMethod::IntegratedGradients, Target::Class(class), None, steps).unwrap();
                let (_, dl) = per_dimension(&p, &ids, AttributionMethod::DeepLift, Target::Class(class), None, steps).unwrap();
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..8 {
                        let expected = w[j] * p.embedding(id)[j] / n;
                        assert!((ig[k][j] - expected).abs() <= 1e-12);
                        assert!((dl[k][j] - expected).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn ig_error_shrinks_with_more_steps() {
        let p = params(20, 8, 13, 12.0);
        let ids = [3, 9, 4, 12];
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| p.embedding(i).to_vec()).collect();
        let delta = logit_with_embeddings(&p, &rows, Label::Hate) - p.head_bias[0];
        let err = |steps| {
            let (_, a) = per_dimension(&p, &ids, AttributionMethod::IntegratedGradients, Target::Class(Label::Hate), None, steps).unwrap();
            (a.iter().flatten().sum::<f64>() - delta).abs()
        };
        let (e4, e16, e64) = (err(4), err(16), err(64));
        assert!(e16 <= e4 + 1e-12 && e64 <= e16 + 1e-12, "{e4} {e16} {e64}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn deeplift_sums_to_delta(
            seed in 0u64..100_000,
            dim in 1usize..=16,
            ids in prop::collection::vec(3usize..30, 1..10),
            scale in 1.0f64..20.0,
            hate in any::<bool>(),
            random_baseline in any::<bool>(),
        ) {
            let p = params(30, dim, seed, scale);
            let class = if hate { Label::Hate } else { Label::NonHate };
            let base = if random_baseline {
                let q = params(30, dim, seed + 1, scale);
                BaselineInput { embeddings: ids.iter().map(|&i| q.embedding(i).to_vec()).collect() }
            } else {
                BaselineInput::zeros(ids.len(), dim)
            };
            let (_, c) = per_dimension(&p, &ids, AttributionMethod::DeepLift, Target::Class(class), Some(&base), 1).unwrap();
            let rows: Vec<Vec<f64>> = ids.iter().map(|&i| p.embedding(i).to_vec()).collect();
            let delta = logit_with_embeddings(&p, &rows, class) - logit_with_embeddings(&p, &base.embeddings, class);
            let total: f64 = c.iter().flatten().sum();
            prop_assert!((total - delta).abs() <= 1e-6, "{} vs {}", total, delta);
        }

        #[test]
        fn ig_is_complete(
            seed in 0u64..100_000,
            dim in 1usize..=16,
            ids in prop::collection::vec(3usize..30, 1..10),
            hate in any::<bool>(),
        ) {
            let p = params(30, dim, seed, 5.0);
            let class = if hate { Label::Hate } else { Label::NonHate };
            let (_, a) = per_dimension(&p, &ids, AttributionMethod::IntegratedGradients, Target::Class(class), None, 50).unwrap();
            let rows: Vec<Vec<f64>> = ids.iter().map(|&i| p.embedding(i).to_vec()).collect();
            let zeros = vec![vec![0.0; dim]; ids.len()];
            let delta = logit_with_embeddings(&p, &rows, class) - logit_with_embeddings(&p, &zeros, class);
            let total: f64 = a.iter().flatten().sum();
            prop_assert!((total - delta).abs() <= 1e-3 * delta.abs().max(1.0));
        }

        #[test]
        fn methods_are_pure(seed in 0u64..1000, m in 0usize..3) {
            let p = params(30, 6, seed, 4.0);
            let method = AttributionMethod::ALL[m];
            let a = per_dimension(&p, &[3, 4, 8], method, Target::Predicted, None, 10).unwrap();
            let b = per_dimension(&p, &[3, 4, 8], method, Target::Predicted, None, 10).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn input_gradient_nodes_match_backward() {
        let p = params(20, 8, 21, 8.0);
        let ids = [3, 9, 4, 12, 7];
        let mut tape = Tape::new();
        let pv = ParamVars::new(&mut tape, &p);
        let xs = p.embed(&mut tape, &ids);
        let f = graph::forward(&mut tape, &pv, xs);
        let analytic = graph::input_gradients(&mut tape, &pv, &f, Label::Hate);
        let z = tape.index(f.logits, 0);
        let g = tape.backward(z);
        for (k, &x) in f.xs.iter().enumerate() {
            let reverse = g.get_or_zeros(x, 8);
            for (a, b) in tape.value(analytic[k]).iter().zip(&reverse) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dump_writes_one_line_per_record() {
        let p = params(20, 4, 1, 1.0);
        let corpus = crate::corpus::Corpus::new(
            "c",
            crate::corpus::Split::Val,
            vec![
                Instance::new("a", vec!["x".into(), "y".into()], Label::Hate),
                Instance::new("b", vec!["y".into()], Label::NonHate),
            ],
        )
        .unwrap();
        let v = Vocabulary::build(&corpus, 1);
        let p = ModelParams { vocab_size: v.len(), embeddings: p.embeddings[..v.len() * 4].to_vec(), ..p };
        let att = Attributor::new(AttributionMethod::DeepLift);
        let recs: Vec<_> = corpus.instances.iter().map(|i| att.explain(&p, &v, i, Target::Predicted).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        write_attribution_dump(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: AttributionRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, recs[0]);
        assert_eq!(back.tokens.len(), back.raw_scores.len());
    }
}
