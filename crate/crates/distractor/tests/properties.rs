//! Property tests for the library's structural invariants.

use distractor::beam::jaccard_distance;
use distractor::corpus::tokenize;
use distractor::decoder::combine_attention;
use distractor::metrics::{bleu, rouge, RougeMode};
use distractor::training::TrainConfig;
use ndarray::Array1;
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-f]{1,3}"
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(word(), 1..8)
}

proptest! {
    #[test]
    fn tokenize_yields_nonempty_lowercased_tokens(text in ".{0,80}") {
        for t in tokenize(&text) {
            prop_assert!(!t.is_empty());
            // every char is already its own lowercase form (chars without a
            // lowercase mapping pass through unchanged)
            for c in t.chars() {
                prop_assert_eq!(c.to_lowercase().next(), Some(c));
            }
        }
    }

    #[test]
    fn tokenize_is_idempotent_on_its_own_output(text in "[a-zA-Z0-9 .,!?']{0,60}") {
        let once = tokenize(&text);
        let again = tokenize(&once.join(" "));
        prop_assert_eq!(once, again);
    }

    #[test]
    fn jaccard_is_a_bounded_symmetric_distance(a in sentence(), b in sentence()) {
        let d = jaccard_distance(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d.to_bits(), jaccard_distance(&b, &a).to_bits());
        prop_assert_eq!(jaccard_distance(&a, &a), 0.0);
    }

    #[test]
    fn combined_attention_is_a_distribution(
        sizes in proptest::collection::vec(1usize..6, 1..5),
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = sizes.len();
        let mut draw = |k: usize| -> Array1<f64> {
            let v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            Array1::from_vec(v) / s
        };
        let alpha: Vec<Array1<f64>> = sizes.iter().map(|&k| draw(k)).collect();
        let beta = draw(n);
        let gamma = draw(n);
        let out = combine_attention(&alpha, &beta, &gamma, &vec![true; n]).unwrap();
        prop_assert!(out.iter().all(|&v| v >= 0.0));
        prop_assert!((out.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_percentage_range(
        cands in proptest::collection::vec(sentence(), 1..5),
        extra in proptest::collection::vec(sentence(), 1..5),
    ) {
        let refs: Vec<Vec<Vec<String>>> = cands
            .iter()
            .zip(extra.iter().cycle())
            .map(|(_, r)| vec![r.clone()])
            .collect();
        for n in 1..=4 {
            let s = bleu(&cands, &refs, n).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
        }
        for mode in [RougeMode::R1, RougeMode::R2, RougeMode::RL] {
            let s = rouge(&cands, &refs, mode).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
        }
    }

    #[test]
    fn identical_candidate_maximizes_unigram_scores(c in sentence()) {
        let cands = vec![c.clone()];
        let refs = vec![vec![c]];
        prop_assert_eq!(bleu(&cands, &refs, 1).unwrap(), 100.0);
        prop_assert_eq!(rouge(&cands, &refs, RougeMode::R1).unwrap(), 100.0);
        prop_assert_eq!(rouge(&cands, &refs, RougeMode::RL).unwrap(), 100.0);
    }

    #[test]
    fn learning_rate_never_increases(steps in proptest::collection::vec(1usize..200_000, 2..20)) {
        let cfg = TrainConfig::default();
        let mut sorted = steps;
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            prop_assert!(cfg.lr_at(w[1]) <= cfg.lr_at(w[0]));
        }
    }
}
