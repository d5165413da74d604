use bicr_core::evaltheory::{closed_form_gap, error_accumulation_sim, fusion_grid_sim, ErrorSimConfig};
use bicr_core::numkernel::{l2_normalize, softmax, Matrix, Parameter, Rng, Sgd, SgdConfig};
use proptest::collection::vec;
use proptest::prelude::*;

fn error_cfg() -> impl Strategy<Value = ErrorSimConfig> {
    (1usize..=8).prop_flat_map(|t| {
        (0.1f64..2.0, vec(1.0f64..=2.0, t - 1), vec(0.0f64..=1.0, t - 1)).prop_map(move |(e_b, e_c, epsilon)| {
            ErrorSimConfig {
                stages: t,
                e_b,
                e_c,
                epsilon,
            }
        })
    })
}

proptest! {
    #[test]
    fn softmax_is_a_positive_distribution(x in vec(-50.0f64..50.0, 1..40)) {
        let p = softmax(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn normalization_is_idempotent(x in vec(-1e3f64..1e3, 1..40)) {
        prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let once = l2_normalize(&x).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_gradient_step_is_identity(seed in any::<u64>(), lr in 1e-4f64..1.0, momentum in 0.0f64..0.99) {
        let value = Rng::new(seed).normal_matrix(3, 4, 1.0);
        let mut p = Parameter::new("w", value.clone());
        let mut sgd = Sgd::new(SgdConfig { lr, momentum, decay_factor: 0.1, decay_epoch: 1 }).unwrap();
        for epoch in 0..3 {
            sgd.step(vec![&mut p], epoch).unwrap();
        }
        prop_assert_eq!(p.value, value);
    }

    #[test]
    fn rng_streams_repeat(seed in any::<u64>(), label in any::<u64>()) {
        let draw = |r: &mut Rng| -> (Matrix, Vec<usize>) {
            let mut order: Vec<usize> = (0..20).collect();
            r.shuffle(&mut order);
            (r.normal_matrix(4, 4, 1.0), order)
        };
        let (mut a, mut b) = (Rng::new(seed).split(label), Rng::new(seed).split(label));
        prop_assert_eq!(draw(&mut a), draw(&mut b));
    }

    #[test]
    fn fusion_never_hurts_and_matches_closed_form(cfg in error_cfg()) {
        let r = error_accumulation_sim(&cfg).unwrap();
        prop_assert!(r.diff >= -1e-12);
        prop_assert!((closed_form_gap(&cfg).unwrap() - r.diff).abs() <= 1e-12 * r.e_f.max(1.0));
    }

    #[test]
    fn gap_grows_with_transfer_error(cfg in error_cfg(), k in any::<prop::sample::Index>(), bump in 0.0f64..0.5) {
        prop_assume!(cfg.stages >= 2);
        let base = error_accumulation_sim(&cfg).unwrap().diff;
        let mut more = cfg.clone();
        let i = k.index(more.e_c.len());
        more.e_c[i] = (more.e_c[i] + bump).min(2.0);
        prop_assert!(error_accumulation_sim(&more).unwrap().diff >= base - 1e-12);
    }

    #[test]
    fn fusion_grid_floor_is_the_constant(seed in any::<u64>(), c in 0.0f64..5.0) {
        let mut rng = Rng::new(seed);
        let (f_old, f_new) = (rng.normal_vec(16, 1.0), rng.normal_vec(16, 1.0));
        let alphas: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let grid = fusion_grid_sim(&alphas, &f_old, &f_new, c).unwrap();
        prop_assert!(grid.min >= c - 1e-12);
        prop_assert!(grid.argmin_is_diagonal());
    }
}
