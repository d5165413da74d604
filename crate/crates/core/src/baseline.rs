//! Per-stage metric learner: an MLP embedder trained with cross-entropy plus
//! batch-hard triplet loss, its identity classifier, and frozen snapshots.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::losses::{DomainStatistics, LossValue};
use crate::numkernel::ops::{normalize_rows, normalize_rows_backward, softmax_rows};
use crate::numkernel::{AffineLayer, Matrix, PReLU, ParamSet, Parameter, Rng, Sgd, SgdConfig};
use crate::synthdata::{LabeledSet, PkSampler};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub raw_dim: usize,
    pub hidden: usize,
    /// Number of `H→H` layers between the input and output layers.
    pub hidden_layers: usize,
    pub dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            raw_dim: 48,
            hidden: 128,
            hidden_layers: 1,
            dim: 32,
        }
    }
}

impl EmbedderConfig {
    /// Wide, deep profile used for extraction-cost comparisons.
    pub fn deep(raw_dim: usize, dim: usize) -> Self {
        Self {
            raw_dim,
            hidden: 256,
            hidden_layers: 8,
            dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.raw_dim == 0 || self.hidden == 0 || self.dim == 0 {
            return Err(Error::Config(format!("embedder widths must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedder {
    layers: Vec<AffineLayer>,
    acts: Vec<PReLU>,
}

#[derive(Debug, Clone)]
pub struct EmbedderCache {
    inputs: Vec<Matrix>,
    pre_acts: Vec<Matrix>,
}

impl Embedder {
    pub fn new(cfg: &EmbedderConfig, rng: &mut Rng) -> Self {
        let mut widths = vec![cfg.raw_dim];
        widths.extend(std::iter::repeat_n(cfg.hidden, cfg.hidden_layers + 1));
        widths.push(cfg.dim);
        let layers: Vec<AffineLayer> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| AffineLayer::new(&format!("embed.fc{i}"), w[0], w[1], true, rng))
            .collect();
        let acts = (0..layers.len() - 1)
            .map(|i| PReLU::new(&format!("embed.act{i}"), widths[i + 1], 0.25))
            .collect();
        Self { layers, acts }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn dim(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if let Some(act) = self.acts.get(i) {
                h = act.forward(&h)?;
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, EmbedderCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.acts.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h)?;
            inputs.push(h);
            h = match self.acts.get(i) {
                Some(act) => {
                    let a = act.forward(&y)?;
                    pre_acts.push(y);
                    a
                }
                None => y,
            };
        }
        Ok((h, EmbedderCache { inputs, pre_acts }))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &EmbedderCache, grad_out: &Matrix) -> Result<Matrix> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.acts.len() {
                g = self.acts[i].backward(&cache.pre_acts[i], &g);
            }
            g = self.layers[i].backward(&cache.inputs[i], &g)?;
        }
        Ok(g)
    }

    /// Per-parameter `ε·old + (1−ε)·new`; the endpoints return exact copies.
    pub fn fuse(old: &Embedder, new: &Embedder, epsilon: f64) -> Result<Embedder> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("fusion weight {epsilon} outside [0, 1]")));
        }
        let (po, pn) = (old.params(), new.params());
        if po.len() != pn.len() || po.iter().zip(&pn).any(|(a, b)| !a.value.same_shape(&b.value)) {
            return Err(dim_err("dff_fuse_models", "embedder architectures differ"));
        }
        if epsilon == 0.0 {
            return Ok(new.clone());
        }
        if epsilon == 1.0 {
            return Ok(old.clone());
        }
        let mut out = new.clone();
        for (dst, src) in out.params_mut().into_iter().zip(po) {
            for (v, o) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *v = epsilon * o + (1.0 - epsilon) * *v;
            }
        }
        Ok(out)
    }
}

impl ParamSet for Embedder {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(l.params());
            if let Some(a) = self.acts.get(i) {
                v.extend(a.params());
            }
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        let mut acts = self.acts.iter_mut();
        for l in self.layers.iter_mut() {
            v.extend(l.params_mut());
            if let Some(a) = acts.next() {
                v.extend(a.params_mut());
            }
        }
        v
    }
}

/// Linear identity classifier over l2-normalized features of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    fc: AffineLayer,
    identities: Vec<u32>,
}

impl ClassifierHead {
    /// A head over `classes` anonymous identities `0..classes`.
    pub fn new(dim: usize, classes: usize, rng: &mut Rng) -> Self {
        Self::for_identities(dim, (0..classes as u32).collect(), rng)
    }

    pub fn for_identities(dim: usize, identities: Vec<u32>, rng: &mut Rng) -> Self {
        Self {
            fc: AffineLayer::new("cls", dim, identities.len(), true, rng),
            identities,
        }
    }

    pub fn classes(&self) -> usize {
        self.identities.len()
    }

    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    pub fn class_of(&self, id: u32) -> Option<usize> {
        self.identities.binary_search(&id).ok()
    }

    pub fn logits(&self, z: &Matrix) -> Result<Matrix> {
        let (n, _) = normalize_rows(z)?;
        self.fc.forward(&n)
    }

    /// Gradient w.r.t. `z` with the head frozen.
    pub fn backward_input(&self, z: &Matrix, grad_logits: &Matrix) -> Result<Matrix> {
        let (n, norms) = normalize_rows(z)?;
        let dn = self.fc.backward_input(grad_logits)?;
        Ok(normalize_rows_backward(&n, &norms, &dn))
    }

    /// Accumulates head gradients and returns the gradient w.r.t. `z`.
    pub fn backward(&mut self, z: &Matrix, grad_logits: &Matrix) -> Result<Matrix> {
        let (n, norms) = normalize_rows(z)?;
        let dn = self.fc.backward(&n, grad_logits)?;
        Ok(normalize_rows_backward(&n, &norms, &dn))
    }
}

impl ParamSet for ClassifierHead {
    fn params(&self) -> Vec<&Parameter> {
        self.fc.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.fc.params_mut()
    }
}

/// Mean softmax cross-entropy; gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<LossValue> {
    if targets.len() != logits.rows() {
        return Err(dim_err("cross_entropy", format!("{} targets for {} rows", targets.len(), logits.rows())));
    }
    let b = logits.rows() as f64;
    let mut p = softmax_rows(logits);
    let mut value = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(dim_err("cross_entropy", format!("target {t} >= {} classes", logits.cols())));
        }
        value -= p.get(i, t).max(1e-300).ln();
        p.set(i, t, p.get(i, t) - 1.0);
    }
    p.scale(1.0 / b);
    Ok(LossValue { value: value / b, grad: p })
}

/// Batch-hard triplet loss on l2-normalized rows, averaged over anchors that
/// have both a positive and a negative in the batch.
pub fn batch_hard_triplet(z: &Matrix, ids: &[u32], margin: f64) -> Result<LossValue> {
    if ids.len() != z.rows() {
        return Err(dim_err("triplet", format!("{} labels for {} rows", ids.len(), z.rows())));
    }
    let (n, norms) = normalize_rows(z)?;
    let b = n.rows();
    let gram = n.matmul_t(&n)?;
    let dist = |i: usize, j: usize| (gram.get(i, i) + gram.get(j, j) - 2.0 * gram.get(i, j)).max(1e-12).sqrt();
    let mut value = 0.0;
    let mut active = Vec::new();
    let mut anchors = 0usize;
    for i in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            let d = dist(i, j);
            if ids[j] == ids[i] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, dp)), Some((q, dn))) = (pos, neg) {
            anchors += 1;
            let l = dp - dn + margin;
            if l > 0.0 {
                value += l;
                active.push((i, p, dp, q, dn));
            }
        }
    }
    let mut d = Matrix::zeros(b, n.cols());
    if anchors == 0 {
        return Ok(LossValue { value: 0.0, grad: d });
    }
    let scale = 1.0 / anchors as f64;
    let mut add = |row: usize, other: usize, dist: f64, sign: f64| {
        let coef = sign * scale / dist;
        for c in 0..n.cols() {
            let diff = n.get(row, c) - n.get(other, c);
            d.set(row, c, d.get(row, c) + coef * diff);
            d.set(other, c, d.get(other, c) - coef * diff);
        }
    };
    for &(i, p, dp, q, dn) in &active {
        add(i, p, dp, 1.0);
        add(i, q, dn, -1.0);
    }
    Ok(LossValue {
        value: value * scale,
        grad: normalize_rows_backward(&n, &norms, &d),
    })
}

/// Settings of the per-stage trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub epochs_first: usize,
    pub epochs_later: usize,
    pub sgd: SgdConfig,
    pub triplet_margin: f64,
    pub batch_ids: usize,
    pub batch_per_id: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs_first: 40,
            epochs_later: 30,
            sgd: SgdConfig {
                lr: 0.01,
                decay_factor: 0.1,
                decay_epoch: 30,
                momentum: 0.0,
            },
            triplet_margin: 0.3,
            batch_ids: 16,
            batch_per_id: 4,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_ids < 2 || self.batch_per_id < 2 {
            return Err(Error::Config(format!(
                "batches need >= 2 identities with >= 2 samples, got {}x{}",
                self.batch_ids, self.batch_per_id
            )));
        }
        if !(self.triplet_margin.is_finite() && self.triplet_margin >= 0.0) {
            return Err(Error::Config(format!("triplet_margin must be >= 0, got {}", self.triplet_margin)));
        }
        Ok(())
    }

    pub fn epochs_for(&self, stage: u32) -> usize {
        if stage <= 1 {
            self.epochs_first
        } else {
            self.epochs_later
        }
    }
}

/// Trains `embedder` in place with a fresh classifier over `data`'s identities.
pub fn train_stage_embedder(
    embedder: &mut Embedder,
    data: &LabeledSet,
    cfg: &BaselineConfig,
    epochs: usize,
    rng: &mut Rng,
) -> Result<ClassifierHead> {
    Ok(train_stage_embedder_logged(embedder, data, cfg, epochs, rng)?.0)
}

/// [`train_stage_embedder`], also returning the mean batch loss of every epoch.
pub fn train_stage_embedder_logged(
    embedder: &mut Embedder,
    data: &LabeledSet,
    cfg: &BaselineConfig,
    epochs: usize,
    rng: &mut Rng,
) -> Result<(ClassifierHead, Vec<f64>)> {
    cfg.validate()?;
    let identities = data.identities();
    let sampler = PkSampler::new(&data.y);
    if identities.len() < 2 || sampler.eligible(2) < 2 {
        return Err(Error::InsufficientData(format!(
            "unlearnable split: {} identities, {} with >= 2 samples",
            identities.len(),
            sampler.eligible(2)
        )));
    }
    let k = if sampler.eligible(cfg.batch_per_id) >= 2 { cfg.batch_per_id } else { 2 };
    let p = cfg.batch_ids.min(sampler.eligible(k));
    let mut head = ClassifierHead::for_identities(embedder.dim(), identities, &mut rng.split_named("classifier"));
    let targets: Vec<usize> = data
        .y
        .iter()
        .map(|&y| head.class_of(y).expect("identity listed"))
        .collect();
    let batches = (data.len() / (p * k)).max(1);
    let mut sgd = Sgd::new(cfg.sgd)?;
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..batches {
            let idx = sampler.sample(p, k, rng)?;
            let x = data.x.select_rows(&idx);
            let ids: Vec<u32> = idx.iter().map(|&i| data.y[i]).collect();
            let tgt: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            embedder.zero_grad();
            head.zero_grad();
            let (z, cache) = embedder.forward_cached(&x)?;
            let ce = cross_entropy(&head.logits(&z)?, &tgt)?;
            let tri = batch_hard_triplet(&z, &ids, cfg.triplet_margin)?;
            if !(ce.value.is_finite() && tri.value.is_finite()) {
                return Err(Error::TrainingDiverged(format!("baseline loss non-finite at epoch {epoch}")));
            }
            let mut dz = head.backward(&z, &ce.grad)?;
            dz.add_assign(&tri.grad)?;
            embedder.backward(&cache, &dz)?;
            let mut params = embedder.params_mut();
            params.extend(head.params_mut());
            sgd.step(params, epoch)?;
            epoch_loss += ce.value + tri.value;
        }
        log.push(epoch_loss / batches as f64);
    }
    Ok((head, log))
}

/// Immutable copy of a finished stage's models and source statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSnapshot {
    stage: u32,
    embedder: Embedder,
    classifier: ClassifierHead,
    stats: DomainStatistics,
}

pub fn snapshot_freeze(stage: u32, embedder: &Embedder, classifier: &ClassifierHead, stats: DomainStatistics) -> StageSnapshot {
    StageSnapshot {
        stage,
        embedder: embedder.clone(),
        classifier: classifier.clone(),
        stats,
    }
}

impl StageSnapshot {
    pub fn stage(&self) -> u32 {
        self.stage
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn classifier(&self) -> &ClassifierHead {
        &self.classifier
    }

    pub fn stats(&self) -> &DomainStatistics {
        &self.stats
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.embedder.forward(x)
    }
}

pub fn compute_domain_stats(embedder: &Embedder, x: &Matrix) -> Result<DomainStatistics> {
    if x.rows() < 2 {
        return Err(Error::InsufficientData(format!(
            "domain statistics need at least 2 samples, got {}",
            x.rows()
        )));
    }
    DomainStatistics::from_features(&embedder.forward(x)?)
}
