//! Synthetic lifelong re-identification streams.
//!
//! Every identity owns a Gaussian base vector; every stage owns a domain map
//! `x ↦ R·(s ⊙ x) + b`. A sample is the mapped base vector of its identity plus
//! isotropic noise. Identities never repeat across stages, and within a stage
//! the identities are split in half between training and gallery. Queries are
//! extra samples of gallery identities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numkernel::{dot, Matrix, Rng};

/// Affine domain shift for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Orthogonal `D×D`.
    pub rotation: Matrix,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub noise_std: f64,
    pub severity: f64,
}

/// Generator settings besides the per-stage counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub stages: usize,
    pub ids_per_stage: usize,
    pub samples_per_id: usize,
    pub raw_dim: usize,
    pub severity: f64,
    /// Per-coordinate noise around an identity's mapped base vector.
    pub noise_std: f64,
    /// Strength of the rotation part relative to `severity`.
    pub rotation_strength: f64,
    /// Log-std of the per-dimension scale at severity 1.
    pub scale_spread: f64,
    /// Std of the per-dimension shift at severity 1.
    pub shift_spread: f64,
    /// Share of each gallery identity's samples held out as queries.
    pub query_fraction: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            stages: 5,
            ids_per_stage: 50,
            samples_per_id: 20,
            raw_dim: 48,
            severity: 1.0,
            noise_std: 0.9,
            rotation_strength: 0.6,
            scale_spread: 0.5,
            shift_spread: 1.0,
            query_fraction: 0.2,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stages == 0 {
            return bad("stages must be >= 1".into());
        }
        if self.ids_per_stage < 4 {
            return bad(format!("ids_per_stage must be >= 4, got {}", self.ids_per_stage));
        }
        if self.samples_per_id < 4 {
            return bad(format!("samples_per_id must be >= 4, got {}", self.samples_per_id));
        }
        if self.raw_dim == 0 {
            return bad("raw_dim must be >= 1".into());
        }
        for (name, v) in [
            ("severity", self.severity),
            ("noise_std", self.noise_std),
            ("rotation_strength", self.rotation_strength),
            ("scale_spread", self.scale_spread),
            ("shift_spread", self.shift_spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return bad(format!("query_fraction must be in (0, 1), got {}", self.query_fraction));
        }
        Ok(())
    }

    fn queries_per_id(&self) -> usize {
        ((self.samples_per_id as f64 * self.query_fraction).round() as usize).clamp(1, self.samples_per_id - 1)
    }
}

/// Rows of raw inputs with one identity label each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub x: Matrix,
    pub y: Vec<u32>,
}

impl LabeledSet {
    pub fn new(x: Matrix, y: Vec<u32>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(dim_err("labeled_set", format!("{} rows, {} labels", x.rows(), y.len())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Distinct labels in ascending order.
    pub fn identities(&self) -> Vec<u32> {
        let mut ids = self.y.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn select(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Row-wise concatenation.
    pub fn concat(sets: &[&LabeledSet]) -> Result<LabeledSet> {
        let cols = sets.first().map_or(0, |s| s.x.cols());
        let mut data = Vec::new();
        let mut y = Vec::new();
        for s in sets {
            if s.x.cols() != cols {
                return Err(dim_err("concat", format!("width {} vs {cols}", s.x.cols())));
            }
            data.extend_from_slice(s.x.data());
            y.extend_from_slice(&s.y);
        }
        Ok(LabeledSet {
            x: Matrix::new(y.len(), cols, data)?,
            y,
        })
    }
}

/// One stage of the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageData {
    /// 1-based.
    pub stage: u32,
    pub domain: DomainSpec,
    pub train: LabeledSet,
    pub gallery: LabeledSet,
    pub query: LabeledSet,
}

impl DomainSpec {
    pub fn identity(dim: usize, noise_std: f64) -> Self {
        Self {
            rotation: Matrix::identity(dim),
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
            noise_std,
            severity: 0.0,
        }
    }

    pub fn random(cfg: &StreamConfig, rng: &mut Rng) -> Self {
        let d = cfg.raw_dim;
        let s = cfg.severity;
        let mut m = Matrix::identity(d);
        let perturb = rng.normal_matrix(d, d, s * cfg.rotation_strength / (d as f64).sqrt());
        m.add_assign(&perturb).expect("same shape");
        Self {
            rotation: orthonormalize(&m),
            scale: (0..d).map(|_| (s * cfg.scale_spread * rng.normal()).exp()).collect(),
            shift: (0..d).map(|_| s * cfg.shift_spread * rng.normal()).collect(),
            noise_std: cfg.noise_std,
            severity: s,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// Noise-free domain map of one vector.
    pub fn apply(&self, base: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = base.iter().zip(&self.scale).map(|(b, s)| b * s).collect();
        (0..self.dim())
            .map(|r| dot(self.rotation.row(r), &scaled) + self.shift[r])
            .collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.shift).map(|(a, b)| a - b).collect();
        let mut out = vec![0.0; self.dim()];
        for (r, c) in centered.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.rotation.row(r)) {
                *o += w * c;
            }
        }
        out.iter().zip(&self.scale).map(|(v, s)| v / s).collect()
    }
}

/// Modified Gram-Schmidt on the rows. The identity maps to itself exactly.
fn orthonormalize(m: &Matrix) -> Matrix {
    let mut q = m.clone();
    for i in 0..q.rows() {
        for j in 0..i {
            let proj = dot(q.row(i), q.row(j));
            if proj != 0.0 {
                let qj = q.row(j).to_vec();
                for (a, b) in q.row_mut(i).iter_mut().zip(&qj) {
                    *a -= proj * b;
                }
            }
        }
        let n = dot(q.row(i), q.row(i)).sqrt();
        if n != 1.0 {
            q.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
    }
    q
}

/// Generates a full stream. Stage `t` owns labels `(t−1)·ids .. t·ids`.
pub fn make_stream(cfg: &StreamConfig, rng: &Rng) -> Result<Vec<StageData>> {
    cfg.validate()?;
    let q_per_id = cfg.queries_per_id();
    (0..cfg.stages)
        .map(|s| {
            let stage = s as u32 + 1;
            let mut r = rng.split(stage as u64);
            let domain = DomainSpec::random(cfg, &mut r);
            let mut labels: Vec<u32> = (0..cfg.ids_per_stage)
                .map(|i| (s * cfg.ids_per_stage + i) as u32)
                .collect();
            r.shuffle(&mut labels);
            let n_train = cfg.ids_per_stage / 2;
            let (train_ids, gallery_ids) = labels.split_at(n_train);
            let mut train_ids = train_ids.to_vec();
            let mut gallery_ids = gallery_ids.to_vec();
            train_ids.sort_unstable();
            gallery_ids.sort_unstable();

            let mut draw = |ids: &[u32], per_id: usize, split_q: usize| {
                let mut main = (Vec::new(), Vec::new());
                let mut held = (Vec::new(), Vec::new());
                for &id in ids {
                    let base = r.normal_vec(cfg.raw_dim, 1.0);
                    let center = domain.apply(&base);
                    for k in 0..per_id {
                        let x: Vec<f64> = center.iter().map(|c| c + domain.noise_std * r.normal()).collect();
                        let dst = if k < split_q { &mut held } else { &mut main };
                        dst.0.extend(x);
                        dst.1.push(id);
                    }
                }
                let to_set = |(x, y): (Vec<f64>, Vec<u32>)| LabeledSet {
                    x: Matrix::new(y.len(), cfg.raw_dim, x).expect("consistent sizes"),
                    y,
                };
                (to_set(main), to_set(held))
            };
            let (train, _) = draw(&train_ids, cfg.samples_per_id, 0);
            let (gallery, query) = draw(&gallery_ids, cfg.samples_per_id, q_per_id);
            Ok(StageData {
                stage,
                domain,
                train,
                gallery,
                query,
            })
        })
        .collect()
}

/// Identity-balanced batch sampler: `P` identities with `K` samples each.
#[derive(Debug, Clone)]
pub struct PkSampler {
    by_id: BTreeMap<u32, Vec<usize>>,
}

impl PkSampler {
    pub fn new(labels: &[u32]) -> Self {
        let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            by_id.entry(y).or_default().push(i);
        }
        Self { by_id }
    }

    /// Identities with at least `k` samples.
    pub fn eligible(&self, k: usize) -> usize {
        self.by_id.values().filter(|v| v.len() >= k).count()
    }

    /// Row indices of one batch, grouped by identity.
    pub fn sample(&self, p: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        let mut ids: Vec<&Vec<usize>> = self.by_id.values().filter(|v| v.len() >= k).collect();
        if ids.len() < p || p == 0 || k == 0 {
            return Err(Error::InsufficientData(format!(
                "need {p} identities with >= {k} samples, have {}",
                ids.len()
            )));
        }
        rng.shuffle(&mut ids);
        let mut out = Vec::with_capacity(p * k);
        for rows in &ids[..p] {
            let mut rows = (*rows).clone();
            rng.shuffle(&mut rows);
            out.extend_from_slice(&rows[..k]);
        }
        Ok(out)
    }
}

/// One PK batch from a stage's training split.
pub fn sample_batch(stage: &StageData, p: usize, k: usize, rng: &mut Rng) -> Result<LabeledSet> {
    let idx = PkSampler::new(&stage.train.y).sample(p, k, rng)?;
    Ok(stage.train.select(&idx))
}
