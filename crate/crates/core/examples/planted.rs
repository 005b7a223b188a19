//! Vanilla training versus attribution regularization on the planted-token
//! benchmark shipped with the tests.
//!
//! cargo run --release --example planted -- [seeds]

use std::collections::BTreeSet;

use dref::corpus::{generate_synthetic, SyntheticSpec, Vocabulary, DEFAULT_MIN_FREQ};
use dref::eval::{macro_f1, mean_std};
use dref::model::predict;
use dref::refine::{mean_abs_attribution, run_dref, RefineConfig, RefineMode};

fn main() -> dref::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let spec: SyntheticSpec = serde_json::from_str(include_str!("../tests/data/planted_synthetic.json"))?;
    let refine: RefineConfig = serde_json::from_str(include_str!("../tests/data/planted_refine.json"))?;
    let planted: BTreeSet<String> = spec.planted_tokens.iter().map(|p| p.token.clone()).collect();

    let mut f1 = [Vec::new(), Vec::new()];
    println!("{:>4}  {:>8}  {:>8}  {:>10}  {:>10}  extracted at", "seed", "vanilla", "reg", "|phi| van", "|phi| reg");
    for seed in 0..seeds {
        let data = generate_synthetic(&SyntheticSpec { seed: spec.seed + seed, ..spec.clone() })?;
        let vocab = Vocabulary::build(&data.source_train, DEFAULT_MIN_FREQ);
        let mut phi = [0.0; 2];
        let mut first_hit = None;
        for (k, mode) in [RefineMode::Vanilla, RefineMode::Reg].into_iter().enumerate() {
            let config = RefineConfig { mode, seed, ..refine.clone() };
            let run = run_dref(&data.source_train, Some(&data.source_val), &data.target_val, &config, &vocab)?;
            let preds: Vec<_> = predict(&run.params, &vocab, &data.target_test)?.into_iter().map(|p| p.predicted).collect();
            f1[k].push(macro_f1(&preds, &data.target_test.labels())? * 100.0);
            phi[k] = mean_abs_attribution(&run.params, &vocab, &data.source_train, &planted, &config.attributor())?
                .unwrap_or(0.0);
            if mode == RefineMode::Reg {
                first_hit = run.history.iter().find(|r| !r.extracted.combined().is_disjoint(&planted)).map(|r| r.epoch);
            }
        }
        let hit = first_hit.map_or("never".to_string(), |e| format!("epoch {e}"));
        let (v, r) = (f1[0][seed as usize], f1[1][seed as usize]);
        println!("{seed:>4}  {v:>8.2}  {r:>8.2}  {:>10.4}  {:>10.4}  {hit}", phi[0], phi[1]);
    }
    let (vm, vs) = mean_std(&f1[0]);
    let (rm, rs) = mean_std(&f1[1]);
    println!("target-test macro-F1: vanilla {vm:.2} ± {vs:.2}, reg {rm:.2} ± {rs:.2}");
    Ok(())
}
