use bicr_core::baseline::ClassifierHead;
use bicr_core::losses::{
    affinity, alignment_loss, anti_forget, direction_consistency_loss, mask_normalize, relation, relation_loss,
    DomainStatistics,
};
use bicr_core::numkernel::{Matrix, Rng};
use proptest::prelude::*;
use proptest::test_runner::Config;

#[derive(Debug)]
struct Batch {
    source: Matrix,
    target: Matrix,
    trans: Matrix,
    ids: Vec<u32>,
    classifier: ClassifierHead,
    stats: DomainStatistics,
}

fn batch(seed: u64, b: usize, c: usize, n_ids: u32) -> Batch {
    let mut rng = Rng::new(seed);
    let ids: Vec<u32> = (0..b).map(|_| rng.below(n_ids as usize) as u32).collect();
    let source = rng.normal_matrix(b, c, 1.0);
    Batch {
        stats: DomainStatistics::from_features(&rng.normal_matrix(8, c, 1.0)).unwrap(),
        classifier: ClassifierHead::new(c, 5, &mut rng),
        target: rng.normal_matrix(b, c, 1.0),
        trans: rng.normal_matrix(b, c, 1.0),
        source,
        ids,
    }
}

fn permute(m: &Matrix, p: &[usize]) -> Matrix {
    m.select_rows(p)
}

fn scale_rows(m: &Matrix, rng: &mut Rng) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let c = (3.0 * rng.normal()).exp();
        out.row_mut(r).iter_mut().for_each(|v| *v *= c);
    }
    out
}

/// Every loss of the transfer objective on one batch.
fn all_losses(x: &Batch, source: &Matrix, target: &Matrix, trans: &Matrix, ids: &[u32]) -> [f64; 5] {
    [
        alignment_loss(target, trans).unwrap(),
        relation(source, trans, ids, false).unwrap().value,
        relation(source, trans, ids, true).unwrap().value,
        anti_forget(&x.classifier, source, trans, &x.stats).unwrap().value,
        direction_consistency_loss(trans, source, target).unwrap(),
    ]
}

proptest! {
    #![proptest_config(Config::with_cases(1000))]

    #[test]
    fn loss_invariants(seed in any::<u64>(), b in 2usize..12, c in 2usize..9, n_ids in 1u32..6) {
        let x = batch(seed, b, c, n_ids);

        let a = affinity(&x.trans).unwrap();
        for r in 0..b {
            let row = a.m.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        for renorm in [false, true] {
            let m = mask_normalize(&a, &x.ids, renorm).unwrap();
            for i in 0..b {
                for j in 0..b {
                    let v = m.m.get(i, j);
                    if x.ids[i] == x.ids[j] {
                        prop_assert_eq!(v.to_bits(), 0f64.to_bits());
                    } else {
                        prop_assert!(v >= 0.0);
                    }
                }
                if renorm && m.denominators[i] > 0.0 {
                    prop_assert!((m.m.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
        let old = mask_normalize(&affinity(&x.source).unwrap(), &x.ids, true).unwrap();
        let new = mask_normalize(&a, &x.ids, true).unwrap();
        prop_assert!(relation_loss(&old, &new).unwrap() >= -1e-12);

        let values = all_losses(&x, &x.source, &x.target, &x.trans, &x.ids);
        prop_assert!(values.iter().all(|v| v.is_finite()));
        for (k, v) in values.iter().enumerate() {
            // the literal mask keeps rows that need not be distributions
            if k != 1 {
                prop_assert!(*v >= -1e-12, "loss {} = {}", k, v);
            }
        }

        // identity inputs
        let mut rng = Rng::new(seed ^ 1);
        let same = scale_rows(&x.target, &mut rng);
        prop_assert!(alignment_loss(&x.target, &same).unwrap().abs() <= 1e-9);
        prop_assert!(relation(&x.source, &scale_rows(&x.source, &mut rng), &x.ids, false).unwrap().value.abs() <= 1e-9);
        prop_assert!(relation(&x.source, &x.source, &x.ids, true).unwrap().value.abs() <= 1e-9);
        let neutral = DomainStatistics::neutral(c);
        prop_assert!(anti_forget(&x.classifier, &x.source, &x.source, &neutral).unwrap().value.abs() <= 1e-9);
        prop_assert!(direction_consistency_loss(&x.target, &x.source, &x.target).unwrap().abs() <= 1e-9);

        // batch permutation
        let mut p: Vec<usize> = (0..b).collect();
        rng.shuffle(&mut p);
        let ids_p: Vec<u32> = p.iter().map(|&i| x.ids[i]).collect();
        let permuted = all_losses(
            &x,
            &permute(&x.source, &p),
            &permute(&x.target, &p),
            &permute(&x.trans, &p),
            &ids_p,
        );
        for (u, v) in values.iter().zip(&permuted) {
            prop_assert!((u - v).abs() <= 1e-12, "{} vs {}", u, v);
        }

        // positive row scaling
        let scaled = all_losses(
            &x,
            &scale_rows(&x.source, &mut rng),
            &scale_rows(&x.target, &mut rng),
            &scale_rows(&x.trans, &mut rng),
            &x.ids,
        );
        for (u, v) in values.iter().zip(&scaled) {
            prop_assert!((u - v).abs() <= 1e-9, "{} vs {}", u, v);
        }
    }

    #[test]
    fn singleton_identities_give_distributions(seed in any::<u64>(), b in 2usize..12, c in 2usize..9) {
        let mut rng = Rng::new(seed);
        let z = rng.normal_matrix(b, c, 1.0);
        let ids: Vec<u32> = (0..b as u32).collect();
        let m = mask_normalize(&affinity(&z).unwrap(), &ids, false).unwrap();
        for i in 0..b {
            prop_assert!((m.m.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
