//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's math; it only reads parameters.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dref::attribution::{normalize_local, AttributionMethod, AttributionRecord};
use dref::corpus::{Corpus, Instance, Label, Split, SyntheticSpec};
use dref::model::ModelParams;
use dref::refine::RefineConfig;
use rand::Rng;

pub fn planted_benchmark() -> (SyntheticSpec, RefineConfig) {
    let synth = serde_json::from_str(include_str!("../data/planted_synthetic.json")).unwrap();
    let refine = serde_json::from_str(include_str!("../data/planted_refine.json")).unwrap();
    (synth, refine)
}

/// `ModelParams::init` with every tensor multiplied by `scale`, which moves
/// the network out of its nearly linear regime.
pub fn scaled_params(vocab_size: usize, dim: usize, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::init(vocab_size, dim, seed);
    for t in [&mut p.embeddings, &mut p.attn_proj, &mut p.attn_bias, &mut p.attn_query, &mut p.head_weights, &mut p.head_bias]
    {
        t.iter_mut().for_each(|v| *v *= scale);
    }
    p
}

pub fn embeddings_of(params: &ModelParams, ids: &[usize]) -> Vec<Vec<f64>> {
    let d = params.dim;
    ids.iter().map(|&i| params.embeddings[i * d..(i + 1) * d].to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention weights of the additive-attention layer, computed directly.
pub fn oracle_attention(params: &ModelParams, xs: &[Vec<f64>]) -> Vec<f64> {
    let d = params.dim;
    let scores: Vec<f64> = xs
        .iter()
        .map(|x| {
            let hidden: Vec<f64> =
                (0..d).map(|r| (dot(&params.attn_proj[r * d..(r + 1) * d], x) + params.attn_bias[r]).tanh()).collect();
            dot(&params.attn_query, &hidden)
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Logits for given attention weights and inputs.
pub fn oracle_logits_with_alpha(params: &ModelParams, xs: &[Vec<f64>], alpha: &[f64]) -> [f64; 2] {
    let d = params.dim;
    let mut h = vec![0.0; d];
    for (x, a) in xs.iter().zip(alpha) {
        for j in 0..d {
            h[j] += a * x[j];
        }
    }
    let row = |c: usize| dot(&params.head_weights[c * d..(c + 1) * d], &h) + params.head_bias[c];
    [row(0), row(1)]
}

pub fn oracle_logits(params: &ModelParams, xs: &[Vec<f64>]) -> [f64; 2] {
    oracle_logits_with_alpha(params, xs, &oracle_attention(params, xs))
}

pub fn random_word(rng: &mut impl Rng, pool: usize) -> String {
    format!("w{}", rng.gen_range(0..pool))
}

/// Instances of random words `w0..w{pool}` with random labels.
pub fn random_corpus(rng: &mut impl Rng, n: usize, pool: usize, max_len: usize) -> Corpus {
    let instances = (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=max_len);
            let tokens = (0..len).map(|_| random_word(rng, pool)).collect();
            let label = if rng.gen_bool(0.5) { Label::Hate } else { Label::NonHate };
            Instance::new(format!("r{i:04}"), tokens, label)
        })
        .collect();
    Corpus::new("random", Split::Val, instances).unwrap()
}

/// A record with independent uniform raw scores.
pub fn random_record(rng: &mut impl Rng, inst: &Instance, class: Label) -> AttributionRecord {
    let raw: Vec<f64> = inst.tokens.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
    let rec = AttributionRecord {
        instance_id: inst.id.clone(),
        method: AttributionMethod::ScaledAttention,
        target_class: class,
        tokens: inst.tokens.clone(),
        raw_scores: raw,
        normalized_scores: vec![],
    };
    normalize_local(rec).unwrap()
}

/// Class-specific mean of normalized scores, found by enumerating every
/// (instance, position) pair separately for each candidate token.
pub fn brute_force_ranking(
    records: &[AttributionRecord],
    corpus: &Corpus,
    min_freq: usize,
    stopwords: &BTreeSet<String>,
) -> [BTreeMap<String, f64>; 2] {
    let vocabulary: BTreeSet<&String> = corpus.instances.iter().flat_map(|i| i.tokens.iter()).collect();
    let mut out = [BTreeMap::new(), BTreeMap::new()];
    for tok in vocabulary {
        let total = corpus.instances.iter().flat_map(|i| i.tokens.iter()).filter(|t| *t == tok).count();
        if total < min_freq || stopwords.contains(tok) || tok.starts_with('<') {
            continue;
        }
        for class in [Label::Hate, Label::NonHate] {
            let mut scores = Vec::new();
            for (j, inst) in corpus.instances.iter().enumerate() {
                if records[j].target_class != class {
                    continue;
                }
                for p in 0..inst.tokens.len() {
                    if &inst.tokens[p] == tok {
                        scores.push(1.0 / (1.0 + (-records[j].raw_scores[p]).exp()));
                    }
                }
            }
            if !scores.is_empty() {
                let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                out[class.index()].insert(tok.clone(), mean);
            }
        }
    }
    out
}

/// Top-k tokens by raw score, for `k_tenths / 10` of the length rounded up.
pub fn oracle_topk(rec: &AttributionRecord, k_tenths: usize) -> BTreeSet<String> {
    let n = rec.raw_scores.len();
    let k = (k_tenths * n).div_ceil(10).max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| rec.raw_scores[b].partial_cmp(&rec.raw_scores[a]).unwrap().then(a.cmp(&b)));
    idx[..k].iter().map(|&i| rec.tokens[i].clone()).collect()
}

/// Central difference of `f` at `x[j]`.
pub fn central_difference(x: &mut [f64], j: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[j];
    x[j] = orig + h;
    let up = f(x);
    x[j] = orig - h;
    let down = f(x);
    x[j] = orig;
    (up - down) / (2.0 * h)
}

pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}
