//! Compatible distillation terms: feature alignment and identity-masked relation KL.

use super::{LossValue, KL_FLOOR};
use crate::error::{dim_err, Error, Result};
use crate::numkernel::ops::{compensated_sum, normalize_rows, normalize_rows_backward, softmax_rows, softmax_rows_backward};
use crate::numkernel::Matrix;

/// `(1/B) Σ ‖z̃_target − z̃_trans‖²`, with gradient w.r.t. `z_trans`.
pub fn alignment(z_target: &Matrix, z_trans: &Matrix) -> Result<LossValue> {
    z_target.ensure_same_shape(z_trans, "alignment_loss")?;
    let b = z_target.rows() as f64;
    let (t, _) = normalize_rows(z_target)?;
    let (s, norms) = normalize_rows(z_trans)?;
    let mut d = Matrix::zeros(s.rows(), s.cols());
    for ((dv, sv), tv) in d.data_mut().iter_mut().zip(s.data()).zip(t.data()) {
        *dv = sv - tv;
    }
    let value = compensated_sum(d.data().iter().map(|v| v * v));
    d.scale(2.0 / b);
    Ok(LossValue {
        value: value / b,
        grad: normalize_rows_backward(&s, &norms, &d),
    })
}

pub fn alignment_loss(z_target: &Matrix, z_trans: &Matrix) -> Result<f64> {
    Ok(alignment(z_target, z_trans)?.value)
}

/// Row-softmax over pairwise cosine similarities, diagonal included.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub m: Matrix,
}

/// Affinity matrix with same-identity entries removed and rows rescaled.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedAffinity {
    pub m: Matrix,
    pub ids: Vec<u32>,
    /// Per-row denominator used for the rescale (0 for excluded rows).
    pub denominators: Vec<f64>,
    pub renormalized: bool,
}

impl MaskedAffinity {
    /// Rows whose every off-diagonal partner shares the anchor's identity.
    pub fn excluded_rows(&self) -> Vec<usize> {
        (0..self.ids.len())
            .filter(|&i| self.ids.iter().enumerate().all(|(j, id)| j == i || *id == self.ids[i]))
            .collect()
    }

    fn same_pattern(&self, other: &MaskedAffinity) -> bool {
        let n = self.ids.len();
        self.m.same_shape(&other.m)
            && other.ids.len() == n
            && (0..n).all(|i| {
                (0..n).all(|j| (self.ids[i] == self.ids[j]) == (other.ids[i] == other.ids[j]))
            })
    }
}

struct AffinityCache {
    z_tilde: Matrix,
    norms: Vec<f64>,
}

fn affinity_with_cache(z: &Matrix) -> Result<(AffinityMatrix, AffinityCache)> {
    if z.rows() < 2 {
        return Err(Error::InsufficientData(format!(
            "affinity needs at least 2 samples, got {}",
            z.rows()
        )));
    }
    let (z_tilde, norms) = normalize_rows(z)?;
    let cos = z_tilde.matmul_t(&z_tilde)?.map(|v| v.clamp(-1.0, 1.0));
    Ok((
        AffinityMatrix { m: softmax_rows(&cos) },
        AffinityCache { z_tilde, norms },
    ))
}

pub fn affinity(z: &Matrix) -> Result<AffinityMatrix> {
    Ok(affinity_with_cache(z)?.0)
}

fn affinity_backward(a: &AffinityMatrix, cache: &AffinityCache, grad_m: &Matrix) -> Result<Matrix> {
    let d_cos = softmax_rows_backward(&a.m, grad_m);
    let mut sym = d_cos.clone();
    sym.add_assign(&d_cos.transpose())?;
    let d_tilde = sym.matmul(&cache.z_tilde)?;
    Ok(normalize_rows_backward(&cache.z_tilde, &cache.norms, &d_tilde))
}

/// Zeroes same-identity entries and rescales each row.
///
/// With `renormalize == false` the row denominator is `Σ_{k≠i} M[i][k]`, which
/// also counts same-identity partners, so rows need not sum to one. With
/// `renormalize == true` only different-identity entries enter the denominator.
pub fn mask_normalize(m: &AffinityMatrix, ids: &[u32], renormalize: bool) -> Result<MaskedAffinity> {
    let b = m.m.rows();
    if ids.len() != b || m.m.cols() != b {
        return Err(dim_err(
            "mask_normalize",
            format!("{} labels for a {:?} affinity", ids.len(), m.m.shape()),
        ));
    }
    let mut out = Matrix::zeros(b, b);
    let mut denominators = vec![0.0; b];
    for i in 0..b {
        let denom: f64 = (0..b)
            .filter(|&k| k != i && (!renormalize || ids[k] != ids[i]))
            .map(|k| m.m.get(i, k))
            .sum();
        let has_partner = (0..b).any(|j| ids[j] != ids[i]);
        if !has_partner || denom <= 0.0 {
            continue;
        }
        denominators[i] = denom;
        for j in 0..b {
            if ids[j] != ids[i] {
                out.set(i, j, m.m.get(i, j) / denom);
            }
        }
    }
    Ok(MaskedAffinity {
        m: out,
        ids: ids.to_vec(),
        denominators,
        renormalized: renormalize,
    })
}

fn mask_backward(m: &AffinityMatrix, masked: &MaskedAffinity, grad: &Matrix) -> Matrix {
    let b = m.m.rows();
    let ids = &masked.ids;
    let mut d = Matrix::zeros(b, b);
    for i in 0..b {
        let s = masked.denominators[i];
        if s == 0.0 {
            continue;
        }
        let inner: f64 = (0..b).map(|l| grad.get(i, l) * masked.m.get(i, l)).sum();
        for k in 0..b {
            let mut v = 0.0;
            if ids[k] != ids[i] {
                v += grad.get(i, k) / s;
            }
            if k != i && (!masked.renormalized || ids[k] != ids[i]) {
                v -= inner / s;
            }
            d.set(i, k, v);
        }
    }
    d
}

/// `(1/B) Σ_i Σ_j M̂old log(M̂old / M̂new)` over entries with `M̂old > 0`.
pub fn relation_loss(m_old: &MaskedAffinity, m_new: &MaskedAffinity) -> Result<f64> {
    Ok(relation_kl(m_old, m_new)?.0)
}

/// KL value and its gradient w.r.t. `m_new`.
fn relation_kl(m_old: &MaskedAffinity, m_new: &MaskedAffinity) -> Result<(f64, Matrix)> {
    if !m_old.same_pattern(m_new) {
        return Err(dim_err("relation_loss", "mask patterns differ"));
    }
    let b = m_old.m.rows();
    let bf = b as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let p = m_old.m.get(i, j);
            if p <= 0.0 || m_old.ids[i] == m_old.ids[j] {
                continue;
            }
            let q = m_new.m.get(i, j);
            value += p * (p / q.max(KL_FLOOR)).ln();
            if q > KL_FLOOR {
                grad.set(i, j, -p / q / bf);
            }
        }
    }
    Ok((value / bf, grad))
}

/// Relation distillation between source-space and transferred features,
/// with gradient w.r.t. `z_trans`.
pub fn relation(z_source: &Matrix, z_trans: &Matrix, ids: &[u32], renormalize: bool) -> Result<LossValue> {
    z_source.ensure_same_shape(z_trans, "relation_loss")?;
    let a_old = affinity(z_source)?;
    let m_old = mask_normalize(&a_old, ids, renormalize)?;
    let (a_new, cache) = affinity_with_cache(z_trans)?;
    let m_new = mask_normalize(&a_new, ids, renormalize)?;
    let (value, d_masked) = relation_kl(&m_old, &m_new)?;
    let d_m = mask_backward(&a_new, &m_new, &d_masked);
    Ok(LossValue {
        value,
        grad: affinity_backward(&a_new, &cache, &d_m)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{finite_diff_check, Parameter, Rng};

    #[test]
    fn alignment_examples() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!((alignment_loss(&a, &b).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(alignment_loss(&a, &a).unwrap(), 0.0);
        assert!(alignment_loss(&a, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn affinity_examples() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let m = affinity(&z).unwrap().m;
        let e = std::f64::consts::E;
        assert!((m.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((m.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
        let same = Matrix::from_rows(&[[0.3, 0.4], [0.3, 0.4], [0.3, 0.4]]).unwrap();
        for v in affinity(&same).unwrap().m.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(affinity(&Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn mask_example_from_hand_application() {
        let m = AffinityMatrix {
            m: Matrix::from_rows(&[[0.5, 0.3, 0.2], [0.3, 0.5, 0.2], [0.2, 0.2, 0.6]]).unwrap(),
        };
        let masked = mask_normalize(&m, &[0, 0, 1], false).unwrap();
        assert_eq!(masked.m.row(0)[0], 0.0);
        assert_eq!(masked.m.row(0)[1], 0.0);
        assert!((masked.m.row(0)[2] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn distinct_ids_give_distributions() {
        let mut rng = Rng::new(3);
        let a = affinity(&rng.normal_matrix(6, 4, 1.0)).unwrap();
        let masked = mask_normalize(&a, &[0, 1, 2, 3, 4, 5], false).unwrap();
        for i in 0..6 {
            assert_eq!(masked.m.get(i, i), 0.0);
            assert!((masked.m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let expect = a.m.get(i, (i + 1) % 6) / (1.0 - a.m.get(i, i));
            assert!((masked.m.get(i, (i + 1) % 6) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn single_identity_batch_has_zero_relation_loss() {
        let mut rng = Rng::new(4);
        let z1 = rng.normal_matrix(4, 3, 1.0);
        let z2 = rng.normal_matrix(4, 3, 1.0);
        let ids = [7, 7, 7, 7];
        let m1 = mask_normalize(&affinity(&z1).unwrap(), &ids, false).unwrap();
        assert_eq!(m1.excluded_rows(), vec![0, 1, 2, 3]);
        assert!(m1.m.data().iter().all(|&v| v == 0.0));
        let lv = relation(&z1, &z2, &ids, false).unwrap();
        assert_eq!(lv.value, 0.0);
        assert!(lv.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_kl_value() {
        let mk = |a: f64, b: f64| MaskedAffinity {
            m: Matrix::from_rows(&[[0.0, a, b], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]).unwrap(),
            ids: vec![0, 1, 2],
            denominators: vec![1.0; 3],
            renormalized: false,
        };
        let kl = relation_loss(&mk(0.4, 0.6), &mk(0.6, 0.4)).unwrap() * 3.0;
        let expect = 0.4 * (0.4f64 / 0.6).ln() + 0.6 * (0.6f64 / 0.4).ln();
        assert!((kl - expect).abs() < 1e-15);
        assert!((kl - 0.08109).abs() < 1e-5);
        assert_eq!(relation_loss(&mk(0.4, 0.6), &mk(0.4, 0.6)).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_masks_are_rejected() {
        let mut rng = Rng::new(5);
        let a = affinity(&rng.normal_matrix(3, 3, 1.0)).unwrap();
        let m1 = mask_normalize(&a, &[0, 0, 1], false).unwrap();
        let m2 = mask_normalize(&a, &[0, 1, 1], false).unwrap();
        assert!(relation_loss(&m1, &m2).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            for renorm in [false, true] {
                let mut rng = Rng::new(seed);
                let src = rng.normal_matrix(6, 4, 1.0);
                let tgt = rng.normal_matrix(6, 4, 1.0);
                let ids = [0, 0, 1, 1, 2, 2];
                let mut ps = vec![Parameter::new("z", rng.normal_matrix(6, 4, 1.0))];
                let r = finite_diff_check(&mut ps, 1e-5, |ps, grad| {
                    let a = alignment(&tgt, &ps[0].value)?;
                    let rel = relation(&src, &ps[0].value, &ids, renorm)?;
                    if grad {
                        ps[0].grad.add_assign(&a.grad)?;
                        ps[0].grad.add_assign(&rel.grad)?;
                    }
                    Ok(a.value + rel.value)
                })
                .unwrap();
                assert!(r.max_rel_err < 1e-6, "seed {seed}: {r:?}");
            }
        }
    }
}
