mod common;

use common::{random_corpus, scaled_params};
use dref::attribution::{AttributionMethod, Attributor};
use dref::corpus::{Corpus, Vocabulary};
use dref::extraction::{extract_spurious, global_ranking, ExtractionConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shuffled(corpus: &Corpus, seed: u64) -> Corpus {
    let mut instances = corpus.instances.clone();
    instances.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Corpus::new(corpus.name.clone(), corpus.split, instances).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn extraction_ignores_instance_order(seed in 0u64..10_000, method in 0usize..3, k in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = random_corpus(&mut rng, 60, 15, 10);
        let target = random_corpus(&mut rng, 40, 15, 10);
        let vocab = Vocabulary::build(&source, 1);
        let params = scaled_params(vocab.len(), 6, seed, 4.0);
        let attributor = Attributor { method: AttributionMethod::ALL[method], ig_steps: 8 };
        let config = ExtractionConfig { k_fraction: k as f64 / 10.0, top_n: 8, min_token_freq: 2, ..ExtractionConfig::default() };

        let ranking = global_ranking(&params, &vocab, &source, &attributor, &config, 1).unwrap();
        let reordered = global_ranking(&params, &vocab, &shuffled(&source, seed + 1), &attributor, &config, 1).unwrap();
        // Sums run in a different order, so compare values to rounding error.
        for class in dref::corpus::Label::ALL {
            let (a, b) = (ranking.list(class), reordered.list(class));
            prop_assert_eq!(a.len(), b.len());
            let mut a = a.to_vec();
            let mut b = b.to_vec();
            a.sort_by(|x, y| x.0.cmp(&y.0));
            b.sort_by(|x, y| x.0.cmp(&y.0));
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(&x.0, &y.0);
                prop_assert!((x.1 - y.1).abs() < 1e-12);
            }
        }

        let set = extract_spurious(&params, &vocab, &target, &ranking, &attributor, &config).unwrap();
        let again = extract_spurious(&params, &vocab, &shuffled(&target, seed + 2), &ranking, &attributor, &config).unwrap();
        prop_assert_eq!(set, again);
    }
}
