use promalign_core::pseudo_labels::soft_label_from_similarities;
use proptest::prelude::*;

fn sims() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..12)
}

fn tau() -> impl Strategy<Value = f64> {
    0.05f64..3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sums_to_one(s in sims(), t in tau()) {
        let q = soft_label_from_similarities(&s, t).unwrap();
        prop_assert!((q.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(q.probs().iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn shift_invariant(s in sims(), t in tau(), c in -50.0f64..50.0) {
        let a = soft_label_from_similarities(&s, t).unwrap();
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let b = soft_label_from_similarities(&shifted, t).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn permutation_equivariant(s in sims(), t in tau(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..s.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let permuted: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
        let a = soft_label_from_similarities(&s, t).unwrap();
        let b = soft_label_from_similarities(&permuted, t).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((b.probs()[j] - a.probs()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn order_preserving(s in sims(), t in tau()) {
        let q = soft_label_from_similarities(&s, t).unwrap();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] > s[j] {
                    prop_assert!(q.probs()[i] >= q.probs()[j]);
                }
            }
        }
    }

    #[test]
    fn lower_temperature_sharpens(s in prop::collection::vec(-2.0f64..2.0, 2..8), t in 0.2f64..2.0) {
        let hot = soft_label_from_similarities(&s, t).unwrap();
        let cold = soft_label_from_similarities(&s, t / 2.0).unwrap();
        prop_assert!(cold.entropy() <= hot.entropy() + 1e-9);
    }
}
