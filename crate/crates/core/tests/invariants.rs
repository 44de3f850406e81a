use std::sync::Arc;

use metaens_core::arch::build_arch;
use metaens_core::codec::{
    apply_norm, detokenize_layer, fit_norm_stats, invert_norm, tokenize_all,
};
use metaens_core::losses::{mean_teacher_probs, shifted};
use metaens_core::metrics::{acc_topn, ece_from_logits};
use metaens_core::rng;
use metaens_core::weights::WeightSet;
use metaens_core::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

fn logits(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[rows, cols], 2.0, &mut rng::stream(seed, "logits"))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn tokens_round_trip_every_layer(classes in 2usize..7, h in 1usize..5, w in 1usize..5, seed: u64) {
        let arch = Arc::new(build_arch("mlp_tiny", classes, [1, h, w]).unwrap());
        let ws = WeightSet::<f64>::init(arch.clone(), &mut rng::stream(seed, "w"));
        let tms = tokenize_all(&ws).unwrap();
        prop_assert_eq!(tms.len(), arch.layers.len());
        for (tm, spec) in tms.iter().zip(&arch.layers) {
            for (role, t) in detokenize_layer(tm, spec).unwrap() {
                prop_assert_eq!(ws.get(&spec.name, role).unwrap(), &t);
            }
        }
    }

    #[test]
    fn norm_inverts(classes in 2usize..6, seed: u64) {
        let arch = Arc::new(build_arch("mlp_tiny", classes, [1, 3, 3]).unwrap());
        let pool: Vec<WeightSet<f64>> = (0..3)
            .map(|i| WeightSet::init(arch.clone(), &mut rng::substream(seed, "pool", i)))
            .collect();
        let stats = fit_norm_stats(&pool).unwrap();
        for tm in tokenize_all(&pool[0]).unwrap() {
            let back = invert_norm(&apply_norm(&tm, &stats).unwrap(), &stats).unwrap();
            for (a, b) in tm.tokens.data().iter().zip(back.tokens.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn shifting_is_a_rotation(n in 1usize..9) {
        let xs: Vec<usize> = (0..n).collect();
        let once = shifted(&xs);
        prop_assert_eq!(once[n - 1], 0);
        prop_assert_eq!(&once[..n - 1], &xs[1..]);
        let mut v = xs.clone();
        for _ in 0..n {
            v = shifted(&v);
        }
        prop_assert_eq!(v, xs);
    }

    #[test]
    fn top_n_accuracy_grows_to_100(rows in 1usize..40, cols in 2usize..8, seed: u64) {
        let l = logits(rows, cols, seed);
        let mut r = rng::stream(seed, "labels");
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..cols)).collect();
        let accs: Vec<f64> = (1..=cols).map(|n| acc_topn(&l, &labels, n).unwrap()).collect();
        prop_assert!(accs.windows(2).all(|p| p[0] <= p[1]));
        prop_assert_eq!(accs[cols - 1], 100.0);
        prop_assert!(acc_topn(&l, &labels, cols + 1).is_err());
        let e = ece_from_logits(&l, &labels, 15).unwrap();
        prop_assert!((0.0..=100.0).contains(&e));
    }

    #[test]
    fn mean_teacher_probs_are_distributions(rows in 1usize..10, cols in 2usize..8, k in 1usize..5, seed: u64, temp in 0.5f64..4.0) {
        let ts: Vec<Tensor<f64>> = (0..k).map(|i| logits(rows, cols, seed ^ i as u64)).collect();
        let p = mean_teacher_probs(&ts, temp).unwrap();
        for i in 0..rows {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn named_streams_are_reproducible(seed: u64) {
        let draw = |name: &str| -> Vec<u64> {
            let mut r = rng::stream(seed, name);
            (0..4).map(|_| r.random()).collect()
        };
        prop_assert_eq!(draw("a"), draw("a"));
        prop_assert_ne!(draw("a"), draw("b"));
    }
}
