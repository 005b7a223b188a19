use super::*;
use crate::corpus::{Corpus, Instance, Label, Split, Vocabulary};
use proptest::prelude::*;

fn random_params(vocab_size: usize, dim: usize, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::init(vocab_size, dim, seed);
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x *= scale;
        }
    }
    p
}

fn central<F: Fn(&ModelParams) -> f64>(p: &ModelParams, tensor: usize, j: usize, f: F) -> f64 {
    let h = 1e-4;
    let mut plus = p.clone();
    plus.tensors_mut()[tensor][j] += h;
    let mut minus = p.clone();
    minus.tensors_mut()[tensor][j] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn probabilities_and_attention_normalize() {
    let p = random_params(12, 8, 3, 10.0);
    let t = forward_ids(&p, &[3, 4, 5, 0, 7], Some(Label::Hate)).unwrap();
    assert!((t.class_probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((t.attention_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(t.attention_weights.iter().all(|a| *a >= 0.0));
    assert_eq!(t.attention_weights.len(), 4);
    assert_eq!(t.positions, vec![0, 1, 2, 4]);
}

#[test]
fn single_token_gets_all_attention() {
    let p = random_params(12, 8, 4, 10.0);
    let t = forward_ids(&p, &[6], None).unwrap();
    assert_eq!(t.attention_weights, vec![1.0]);
}

#[test]
fn empty_input_is_rejected() {
    let p = random_params(12, 4, 4, 1.0);
    assert!(matches!(forward_ids(&p, &[], None), Err(Error::EmptyInstance(_))));
    assert!(matches!(forward_ids(&p, &[0, 0], None), Err(Error::EmptyInstance(_))));
    assert!(forward_ids(&p, &[99], None).is_err());
}

#[test]
fn swapping_identical_embeddings_keeps_probabilities() {
    let mut p = random_params(12, 8, 5, 10.0);
    let row: Vec<f64> = p.embedding(3).to_vec();
    p.embeddings[4 * 8..5 * 8].copy_from_slice(&row);
    let a = forward_ids(&p, &[3, 7, 4], None).unwrap();
    let b = forward_ids(&p, &[4, 7, 3], None).unwrap();
    assert_eq!(a.class_probabilities, b.class_probabilities);
}

#[test]
fn argmax_ties_go_to_non_hate() {
    assert_eq!(argmax_class([0.7f64.ln(), 0.3f64.ln()]), Label::Hate);
    assert_eq!(argmax_class([0.5, 0.5]), Label::NonHate);
    assert_eq!(argmax_class([0.1, 0.2]), Label::NonHate);
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let p = random_params(20, 8, 11, 8.0);
    let t = forward_ids(&p, &[3, 9, 4, 12, 7], None).unwrap();
    for class in Label::ALL {
        let req = GradientRequest { scalar_target: ScalarTarget::Logit(class), wrt: Wrt::AttentionWeights };
        let GradientValue::AttentionWeights(g) = gradient(&p, &t, req).unwrap() else { panic!() };
        for (i, gi) in g.iter().enumerate() {
            let logit_at = |alpha: &[f64]| {
                let mut h = vec![0.0; p.dim];
                for (k, &pos) in t.positions.iter().enumerate() {
                    for (hd, e) in h.iter_mut().zip(p.embedding(t.token_ids[pos])) {
                        *hd += alpha[k] * e;
                    }
                }
                let w = &p.head_weights[class.index() * p.dim..(class.index() + 1) * p.dim];
                crate::autodiff::dot(w, &h) + p.head_bias[class.index()]
            };
            let hstep = 1e-4;
            let mut up = t.attention_weights.clone();
            up[i] += hstep;
            let mut down = t.attention_weights.clone();
            down[i] -= hstep;
            let fd = (logit_at(&up) - logit_at(&down)) / (2.0 * hstep);
            assert!((fd - gi).abs() <= 1e-4, "{fd} vs {gi}");
        }
    }
}

#[test]
fn constant_target_has_zero_gradient() {
    let p = random_params(20, 8, 2, 5.0);
    let t = forward_ids(&p, &[3, 4], Some(Label::Hate)).unwrap();
    let req = GradientRequest { scalar_target: ScalarTarget::Constant(3.0), wrt: Wrt::Parameters };
    let GradientValue::Parameters(g) = gradient(&p, &t, req).unwrap() else { panic!() };
    assert!(g.is_zero());
}

#[test]
fn pad_positions_have_zero_embedding_gradient() {
    let p = random_params(20, 8, 2, 5.0);
    let t = forward_ids(&p, &[3, 0, 4], None).unwrap();
    let req = GradientRequest { scalar_target: ScalarTarget::Logit(Label::Hate), wrt: Wrt::Embeddings };
    let GradientValue::Embeddings(rows) = gradient(&p, &t, req).unwrap() else { panic!() };
    assert_eq!(rows.len(), 3);
    assert!(rows[1].iter().all(|x| *x == 0.0));
    assert!(rows[0].iter().any(|x| *x != 0.0));
}

#[test]
fn loss_without_gold_label_is_an_error() {
    let p = random_params(20, 4, 2, 1.0);
    let t = forward_ids(&p, &[3], None).unwrap();
    let req = GradientRequest { scalar_target: ScalarTarget::Loss, wrt: Wrt::Parameters };
    assert!(matches!(gradient(&p, &t, req), Err(Error::InvalidRequest(_))));
}

fn scalar_of(p: &ModelParams, ids: &[usize], target: ScalarTarget, gold: Label) -> f64 {
    let t = forward_ids(p, ids, Some(gold)).unwrap();
    match target {
        ScalarTarget::Logit(c) => t.logits[c.index()],
        ScalarTarget::Probability(c) => t.class_probabilities[c.index()],
        ScalarTarget::Loss => -t.class_probabilities[gold.index()].ln(),
        ScalarTarget::Constant(c) => c,
    }
}

fn dense_param_grad(g: &ParamGrads, tensor: usize, j: usize, dim: usize) -> f64 {
    if tensor == 0 {
        g.embedding_row(j / dim, dim)[j % dim]
    } else {
        g.dense()[tensor - 1][j]
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parameter_gradients_match_finite_differences(
        seed in 0u64..10_000,
        dim in 1usize..=16,
        ids in prop::collection::vec(0usize..10, 1..7),
        which in 0usize..3,
        gold_hate in any::<bool>(),
    ) {
        prop_assume!(ids.iter().any(|&i| i != 0));
        let p = random_params(10, dim, seed, 6.0);
        let gold = if gold_hate { Label::Hate } else { Label::NonHate };
        let target = [ScalarTarget::Logit(Label::Hate), ScalarTarget::Probability(Label::NonHate), ScalarTarget::Loss][which];
        let t = forward_ids(&p, &ids, Some(gold)).unwrap();
        let GradientValue::Parameters(g) = gradient(&p, &t, GradientRequest { scalar_target: target, wrt: Wrt::Parameters }).unwrap() else { unreachable!() };
        for tensor in 0..6 {
            let len = p.tensors()[tensor].len();
            let start = if tensor == 0 { dim } else { 0 };
            for j in start..len {
                let fd = central(&p, tensor, j, |q| scalar_of(q, &ids, target, gold));
                let an = dense_param_grad(&g, tensor, j, dim);
                prop_assert!(close(fd, an, 1e-4), "tensor {} entry {}: fd {} analytic {}", tensor, j, fd, an);
            }
        }
    }
}

fn toy_corpus() -> (Corpus, Vocabulary) {
    let mut instances = Vec::new();
    for i in 0..40 {
        let (tok, label) = if i % 2 == 0 { ("bad", Label::Hate) } else { ("good", Label::NonHate) };
        let filler = ["x", "y", "z"][i % 3];
        instances.push(Instance::new(format!("i{i}"), vec![filler.into(), tok.into(), filler.into()], label));
    }
    let c = Corpus::new("toy", Split::Train, instances).unwrap();
    let v = Vocabulary::build(&c, 1);
    (c, v)
}

#[test]
fn separable_data_is_learned() {
    let (c, v) = toy_corpus();
    let mut p = ModelParams::init(v.len(), 8, 1);
    let mut opt = AdamW::new(TrainConfig { learning_rate: 0.05, ..TrainConfig::default() }, &p);
    for e in 0..5 {
        train_epoch(&mut p, &c, &v, &LossSpec::classification_only(), &mut opt, e).unwrap();
    }
    let preds = predict(&p, &v, &c).unwrap();
    let correct = preds.iter().zip(&c.instances).filter(|(p, i)| p.predicted == i.label).count();
    assert!(correct as f64 / c.len() as f64 >= 0.95);
    assert_eq!(p.embedding(0), vec![0.0; 8].as_slice());
}

#[test]
fn training_is_deterministic() {
    let (c, v) = toy_corpus();
    let run = || {
        let mut p = ModelParams::init(v.len(), 8, 9);
        let mut opt = AdamW::new(TrainConfig::default(), &p);
        let s = train_epoch(&mut p, &c, &v, &LossSpec::classification_only(), &mut opt, 4).unwrap();
        (p, s)
    };
    assert_eq!(run(), run());
}

struct Zero;
impl AuxiliaryLoss for Zero {
    fn build(&self, tape: &mut Tape, _: &graph::ParamVars, f: &graph::Forward, _: &[usize], _: &str) -> Result<Option<Var>> {
        Ok(Some(tape.dot(f.pooled, f.pooled)))
    }
}

#[test]
fn zero_lambda_matches_plain_training() {
    let (c, v) = toy_corpus();
    let aux = Zero;
    let run = |spec: LossSpec<'_>| {
        let mut p = ModelParams::init(v.len(), 8, 9);
        let mut opt = AdamW::new(TrainConfig::default(), &p);
        let s = train_epoch(&mut p, &c, &v, &spec, &mut opt, 4).unwrap();
        (p, s)
    };
    assert_eq!(run(LossSpec::with_auxiliary(0.0, &aux)), run(LossSpec::classification_only()));
    let (_, s) = run(LossSpec::with_auxiliary(1.0, &aux));
    assert!(s.attribution_loss > 0.0);
}

#[test]
fn non_finite_loss_names_the_batch() {
    let (c, v) = toy_corpus();
    let mut p = ModelParams::init(v.len(), 4, 1);
    p.head_bias[0] = f64::INFINITY;
    let mut opt = AdamW::new(TrainConfig::default(), &p);
    let err = train_epoch(&mut p, &c, &v, &LossSpec::classification_only(), &mut opt, 0).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { batch: 0, .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_and_hash_check() {
    let (c, v) = toy_corpus();
    let p = ModelParams::init(v.len(), 4, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&p, &v, &path).unwrap();
    assert_eq!(load_checkpoint(&path, &v).unwrap(), p);
    let other = Vocabulary::build(&c, 100);
    assert!(matches!(load_checkpoint(&path, &other), Err(Error::VocabularyMismatch { .. })));
}
