use serde::{Deserialize, Serialize};

use super::config::EpsilonScale;
use crate::baseline::{Embedder, StageSnapshot};
use crate::error::{Error, Result};
use crate::losses::affinity;
use crate::numkernel::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonValue {
    /// Mean absolute affinity change, in `[0, 2]`.
    pub raw: f64,
    /// Fusion weight in `[0, 1]`.
    pub used: f64,
}

/// Mean absolute difference between the two models' affinity matrices over `x`.
///
/// Rows are dealt round-robin into `⌊n / batch⌋` blocks (at least one), so every
/// block holds at least `batch` samples and mixes identities. The per-block
/// values are averaged.
pub fn compute_epsilon(
    old: Option<&Embedder>,
    new: &Embedder,
    x: &Matrix,
    batch: usize,
    scale: EpsilonScale,
) -> Result<EpsilonValue> {
    let old = old.ok_or_else(|| Error::Protocol("knowledge change is undefined without a previous model".into()))?;
    let n = x.rows();
    if n < 2 {
        return Err(Error::InsufficientData(format!("knowledge change needs >= 2 samples, got {n}")));
    }
    if batch < 2 {
        return Err(Error::Config(format!("epsilon batch must be >= 2, got {batch}")));
    }
    let z_old = old.forward(x)?;
    let z_new = new.forward(x)?;
    let blocks = (n / batch).max(1);
    let mut total = 0.0;
    for b in 0..blocks {
        let idx: Vec<usize> = (b..n).step_by(blocks).collect();
        let m_old = affinity(&z_old.select_rows(&idx))?;
        let m_new = affinity(&z_new.select_rows(&idx))?;
        let sum: f64 = m_old.m.data().iter().zip(m_new.m.data()).map(|(a, b)| (a - b).abs()).sum();
        total += sum / idx.len() as f64;
    }
    let raw = total / blocks as f64;
    if !raw.is_finite() {
        return Err(Error::TrainingDiverged("knowledge change is not finite".into()));
    }
    Ok(EpsilonValue {
        raw,
        used: scale.apply(raw),
    })
}

/// `ε·φ_old + (1−ε)·φ_new`, parameter by parameter.
pub fn dff_fuse_models(old: &StageSnapshot, new: &Embedder, epsilon: f64) -> Result<Embedder> {
    Embedder::fuse(old.embedder(), new, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{snapshot_freeze, ClassifierHead, EmbedderConfig};
    use crate::losses::DomainStatistics;
    use crate::numkernel::{ParamSet, Rng};

    fn emb(seed: u64) -> Embedder {
        let cfg = EmbedderConfig {
            raw_dim: 6,
            hidden: 8,
            hidden_layers: 1,
            dim: 4,
        };
        Embedder::new(&cfg, &mut Rng::new(seed))
    }

    #[test]
    fn identical_models_give_zero() {
        let e = emb(1);
        let x = Rng::new(2).normal_matrix(50, 6, 1.0);
        let v = compute_epsilon(Some(&e), &e, &x, 16, EpsilonScale::Clamp).unwrap();
        assert_eq!(v.raw, 0.0);
        assert_eq!(v.used, 0.0);
    }

    #[test]
    fn bounded_by_total_variation() {
        let x = Rng::new(3).normal_matrix(40, 6, 3.0);
        for seed in 0..10 {
            let v = compute_epsilon(Some(&emb(seed)), &emb(seed + 100), &x, 8, EpsilonScale::Clamp).unwrap();
            assert!(v.raw > 0.0 && v.raw <= 2.0);
            assert!(v.used <= 1.0);
            let h = compute_epsilon(Some(&emb(seed)), &emb(seed + 100), &x, 8, EpsilonScale::Halve).unwrap();
            assert_eq!(h.used, v.raw / 2.0);
        }
    }

    #[test]
    fn blocks_average_single_block_values() {
        let (a, b) = (emb(4), emb(5));
        let x = Rng::new(6).normal_matrix(9, 6, 1.0);
        let whole = compute_epsilon(Some(&a), &b, &x, 9, EpsilonScale::Clamp).unwrap().raw;
        let big = compute_epsilon(Some(&a), &b, &x, 100, EpsilonScale::Clamp).unwrap().raw;
        assert_eq!(whole, big);
        let split = compute_epsilon(Some(&a), &b, &x, 4, EpsilonScale::Clamp).unwrap().raw;
        let part = |idx: &[usize]| {
            let sub = x.select_rows(idx);
            compute_epsilon(Some(&a), &b, &sub, 100, EpsilonScale::Clamp).unwrap().raw
        };
        let want = (part(&[0, 2, 4, 6, 8]) + part(&[1, 3, 5, 7])) / 2.0;
        assert!((split - want).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let e = emb(7);
        let x = Rng::new(1).normal_matrix(4, 6, 1.0);
        assert!(matches!(compute_epsilon(None, &e, &x, 4, EpsilonScale::Clamp), Err(Error::Protocol(_))));
        let one = Rng::new(1).normal_matrix(1, 6, 1.0);
        assert!(compute_epsilon(Some(&e), &e, &one, 4, EpsilonScale::Clamp).is_err());
    }

    #[test]
    fn fusion_endpoints_and_midpoint() {
        let (o, n) = (emb(8), emb(9));
        let mut rng = Rng::new(0);
        let snap = snapshot_freeze(1, &o, &ClassifierHead::new(4, 3, &mut rng), DomainStatistics::neutral(4));
        assert_eq!(dff_fuse_models(&snap, &n, 0.0).unwrap(), n);
        assert_eq!(dff_fuse_models(&snap, &n, 1.0).unwrap(), o);
        let mid = dff_fuse_models(&snap, &n, 0.5).unwrap();
        for ((m, a), b) in mid.params().iter().zip(o.params()).zip(n.params()) {
            for ((x, y), z) in m.value.data().iter().zip(a.value.data()).zip(b.value.data()) {
                assert_eq!(x.to_bits(), (0.5 * y + 0.5 * z).to_bits());
                assert!(*x >= y.min(*z) && *x <= y.max(*z));
            }
        }
    }
}
