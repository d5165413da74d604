//! Bidirectional compatible transfer network.
//!
//! Each block mixes a prototype-attention branch (knowledge capture) and a
//! bottleneck MLP branch (forward mapping) with a per-sample gate, then adds
//! the l2-normalized input back:
//!
//! ```text
//! z̃   = z / ‖z‖
//! k   = softmax(g_c(z̃))           g_c: C → C → C → P, PReLU between
//! z_c = k · V                      V: P×C prototypes
//! z_m = g_s(z̃)                     g_s: C → C0 → BN → PReLU → C
//! a   = sigmoid(w·z̃ + b)
//! out = (1 − a)·z_c + a·z_m + z̃
//! ```
//!
//! A network is a cascade of four independent blocks. Every block normalizes
//! its own input, so intermediate outputs are re-normalized before the next block.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numkernel::ops::{
    normalize_rows, normalize_rows_backward, sigmoid, softmax_rows, softmax_rows_backward,
};
use crate::numkernel::{
    AffineLayer, BatchNorm, BatchNormCache, Matrix, Mode, PReLU, ParamSet, Parameter, Rng,
};

pub const CASCADE_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BictConfig {
    /// Feature width C.
    pub dim: usize,
    /// Prototype count P.
    pub prototypes: usize,
    /// Mapping bottleneck width C0.
    pub bottleneck: usize,
    /// When set, replaces the learned gate with a constant balancing factor.
    #[serde(default)]
    pub fixed_gate: Option<f64>,
    /// Multiplies the initial prototypes and the mapping head's output layer.
    pub branch_init_scale: f64,
}

impl BictConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.prototypes == 0 || self.bottleneck == 0 {
            return Err(crate::error::Error::Config(format!("bict widths must be >= 1: {self:?}")));
        }
        if let Some(a) = self.fixed_gate {
            if !(0.0..=1.0).contains(&a) {
                return Err(crate::error::Error::Config(format!("fixed_gate must lie in [0, 1], got {a}")));
            }
        }
        if !(self.branch_init_scale >= 0.0 && self.branch_init_scale.is_finite()) {
            return Err(crate::error::Error::Config(format!(
                "branch_init_scale must be finite and >= 0, got {}",
                self.branch_init_scale
            )));
        }
        Ok(())
    }
}

impl Default for BictConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            prototypes: 16,
            bottleneck: 32,
            fixed_gate: None,
            branch_init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Old feature space to new feature space.
    Forward,
    /// New feature space back to the old one.
    Backward,
}

/// Three-layer MLP producing prototype logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureHead {
    pub fc1: AffineLayer,
    pub act1: PReLU,
    pub fc2: AffineLayer,
    pub act2: PReLU,
    pub fc3: AffineLayer,
}

/// Bottleneck MLP `C → C0 → C`. The first layer has no bias since batch norm follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingHead {
    pub down: AffineLayer,
    pub bn: BatchNorm,
    pub act: PReLU,
    pub up: AffineLayer,
}

/// Scalar sigmoid gate per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateHead {
    pub fc: AffineLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiCTBlock {
    pub prototypes: Parameter,
    pub capture: CaptureHead,
    pub mapping: MappingHead,
    pub gate: GateHead,
    pub fixed_gate: Option<f64>,
}

/// Saved activations of one block for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    z_tilde: Matrix,
    norms: Vec<f64>,
    h1: Matrix,
    p1: Matrix,
    h2: Matrix,
    p2: Matrix,
    k: Matrix,
    z_c: Matrix,
    bn_cache: BatchNormCache,
    b: Matrix,
    p: Matrix,
    z_m: Matrix,
    a: Vec<f64>,
}

impl BlockCache {
    /// Gate values of the forward pass that produced this cache.
    pub fn gate_values(&self) -> &[f64] {
        &self.a
    }

    /// Smallest |input| over the block's PReLU activations.
    pub fn min_prelu_margin(&self) -> f64 {
        [&self.h1, &self.h2, &self.b]
            .iter()
            .flat_map(|m| m.data().iter())
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }
}

impl BiCTBlock {
    pub fn new(name: &str, cfg: &BictConfig, rng: &mut Rng) -> Self {
        let (c, p, c0) = (cfg.dim, cfg.prototypes, cfg.bottleneck);
        let proto_std = cfg.branch_init_scale * (1.0 / c as f64).sqrt();
        let mut up = AffineLayer::new(&format!("{name}.mapping.up"), c0, c, true, rng);
        up.weight.value.scale(cfg.branch_init_scale);
        Self {
            prototypes: Parameter::new(format!("{name}.prototypes"), rng.normal_matrix(p, c, proto_std)),
            capture: CaptureHead {
                fc1: AffineLayer::new(&format!("{name}.capture.fc1"), c, c, true, rng),
                act1: PReLU::new(&format!("{name}.capture.act1"), c, 0.25),
                fc2: AffineLayer::new(&format!("{name}.capture.fc2"), c, c, true, rng),
                act2: PReLU::new(&format!("{name}.capture.act2"), c, 0.25),
                fc3: AffineLayer::new(&format!("{name}.capture.fc3"), c, p, true, rng),
            },
            mapping: MappingHead {
                down: AffineLayer::new(&format!("{name}.mapping.down"), c, c0, false, rng),
                bn: BatchNorm::new(&format!("{name}.mapping.bn"), c0),
                act: PReLU::new(&format!("{name}.mapping.act"), c0, 0.25),
                up,
            },
            gate: GateHead {
                fc: AffineLayer::new(&format!("{name}.gate"), c, 1, true, rng),
            },
            fixed_gate: cfg.fixed_gate,
        }
    }

    pub fn dim(&self) -> usize {
        self.prototypes.value.cols()
    }

    fn check_width(&self, z: &Matrix) -> Result<()> {
        if z.cols() != self.dim() {
            return Err(dim_err(
                "bict block",
                format!("input width {} vs block width {}", z.cols(), self.dim()),
            ));
        }
        Ok(())
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mapping.bn.mode = mode;
    }

    /// Prototype logits from normalized input.
    fn capture_logits(&self, z_tilde: &Matrix) -> Result<(Matrix, Matrix, Matrix, Matrix, Matrix)> {
        let h1 = self.capture.fc1.forward(z_tilde)?;
        let p1 = self.capture.act1.forward(&h1)?;
        let h2 = self.capture.fc2.forward(&p1)?;
        let p2 = self.capture.act2.forward(&h2)?;
        let logits = self.capture.fc3.forward(&p2)?;
        Ok((h1, p1, h2, p2, logits))
    }

    /// Knowledge capture: `z_c = softmax(g_c(z̃)) · V` for already normalized `z̃`.
    pub fn kcm_forward(&self, z_tilde: &Matrix) -> Result<Matrix> {
        self.check_width(z_tilde)?;
        let (.., logits) = self.capture_logits(z_tilde)?;
        softmax_rows(&logits).matmul(&self.prototypes.value)
    }

    /// Capture probabilities `k` (rows sum to one).
    pub fn capture_probabilities(&self, z_tilde: &Matrix) -> Result<Matrix> {
        self.check_width(z_tilde)?;
        let (.., logits) = self.capture_logits(z_tilde)?;
        Ok(softmax_rows(&logits))
    }

    /// Forward mapping `z_m = g_s(z̃)`, honoring the batch-norm mode.
    pub fn fmm_forward(&mut self, z_tilde: &Matrix) -> Result<Matrix> {
        self.check_width(z_tilde)?;
        let u = self.mapping.down.forward(z_tilde)?;
        let (b, _) = self.mapping.bn.apply(&u)?;
        let p = self.mapping.act.forward(&b)?;
        self.mapping.up.forward(&p)
    }

    /// Gate values `a^m` in (0, 1), or the fixed factor when configured.
    pub fn gate_forward(&self, z_tilde: &Matrix) -> Result<Vec<f64>> {
        if let Some(a) = self.fixed_gate {
            return Ok(vec![a; z_tilde.rows()]);
        }
        let s = self.gate.fc.forward(z_tilde)?;
        Ok(s.data().iter().map(|&v| sigmoid(v)).collect())
    }

    /// Eval-mode block output on a shared reference.
    pub fn infer(&self, z: &Matrix) -> Result<Matrix> {
        self.check_width(z)?;
        let (z_tilde, _) = normalize_rows(z)?;
        let z_c = self.kcm_forward(&z_tilde)?;
        let u = self.mapping.down.forward(&z_tilde)?;
        let b = self.mapping.bn.infer(&u)?;
        let p = self.mapping.act.forward(&b)?;
        let z_m = self.mapping.up.forward(&p)?;
        let a = self.gate_forward(&z_tilde)?;
        Ok(combine(&z_c, &z_m, &z_tilde, &a))
    }

    /// Block output in the current mode, with the cache needed by [`Self::backward`].
    pub fn forward(&mut self, z: &Matrix) -> Result<(Matrix, BlockCache)> {
        self.check_width(z)?;
        let (z_tilde, norms) = normalize_rows(z)?;
        let (h1, p1, h2, p2, logits) = self.capture_logits(&z_tilde)?;
        let k = softmax_rows(&logits);
        let z_c = k.matmul(&self.prototypes.value)?;
        let u = self.mapping.down.forward(&z_tilde)?;
        let (b, bn_cache) = self.mapping.bn.apply(&u)?;
        let p = self.mapping.act.forward(&b)?;
        let z_m = self.mapping.up.forward(&p)?;
        let a = self.gate_forward(&z_tilde)?;
        let out = combine(&z_c, &z_m, &z_tilde, &a);
        Ok((
            out,
            BlockCache {
                z_tilde,
                norms,
                h1,
                p1,
                h2,
                p2,
                k,
                z_c,
                bn_cache,
                b,
                p,
                z_m,
                a,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the block input.
    pub fn backward(&mut self, cache: &BlockCache, grad_out: &Matrix) -> Result<Matrix> {
        let (n, c) = grad_out.shape();
        let mut d_tilde = grad_out.clone();
        let mut d_zc = Matrix::zeros(n, c);
        let mut d_zm = Matrix::zeros(n, c);
        let mut d_s = Matrix::zeros(n, 1);
        for i in 0..n {
            let a = cache.a[i];
            let g = grad_out.row(i);
            let mut da = 0.0;
            for j in 0..c {
                da += g[j] * (cache.z_m.get(i, j) - cache.z_c.get(i, j));
                d_zc.set(i, j, g[j] * (1.0 - a));
                d_zm.set(i, j, g[j] * a);
            }
            d_s.set(i, 0, da * a * (1.0 - a));
        }

        if self.fixed_gate.is_none() {
            let d = self.gate.fc.backward(&cache.z_tilde, &d_s)?;
            d_tilde.add_assign(&d)?;
        }

        // knowledge capture
        let dk = d_zc.matmul_t(&self.prototypes.value)?;
        let dv = cache.k.t_matmul(&d_zc)?;
        self.prototypes.grad.add_assign(&dv)?;
        let d_logits = softmax_rows_backward(&cache.k, &dk);
        let d_p2 = self.capture.fc3.backward(&cache.p2, &d_logits)?;
        let d_h2 = self.capture.act2.backward(&cache.h2, &d_p2);
        let d_p1 = self.capture.fc2.backward(&cache.p1, &d_h2)?;
        let d_h1 = self.capture.act1.backward(&cache.h1, &d_p1);
        let d = self.capture.fc1.backward(&cache.z_tilde, &d_h1)?;
        d_tilde.add_assign(&d)?;

        // forward mapping
        let d_p = self.mapping.up.backward(&cache.p, &d_zm)?;
        let d_b = self.mapping.act.backward(&cache.b, &d_p);
        let d_u = self.mapping.bn.backward(&cache.bn_cache, &d_b);
        let d = self.mapping.down.backward(&cache.z_tilde, &d_u)?;
        d_tilde.add_assign(&d)?;

        Ok(normalize_rows_backward(&cache.z_tilde, &cache.norms, &d_tilde))
    }
}

fn combine(z_c: &Matrix, z_m: &Matrix, z_tilde: &Matrix, a: &[f64]) -> Matrix {
    let mut out = z_tilde.clone();
    for (i, &ai) in a.iter().enumerate() {
        for ((o, &c), &m) in out.row_mut(i).iter_mut().zip(z_c.row(i)).zip(z_m.row(i)) {
            *o += (1.0 - ai) * c + ai * m;
        }
    }
    out
}

impl ParamSet for BiCTBlock {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.prototypes];
        v.extend(self.capture.fc1.params());
        v.extend(self.capture.act1.params());
        v.extend(self.capture.fc2.params());
        v.extend(self.capture.act2.params());
        v.extend(self.capture.fc3.params());
        v.extend(self.mapping.down.params());
        v.extend(self.mapping.bn.params());
        v.extend(self.mapping.act.params());
        v.extend(self.mapping.up.params());
        if self.fixed_gate.is_none() {
            v.extend(self.gate.fc.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.prototypes];
        v.extend(self.capture.fc1.params_mut());
        v.extend(self.capture.act1.params_mut());
        v.extend(self.capture.fc2.params_mut());
        v.extend(self.capture.act2.params_mut());
        v.extend(self.capture.fc3.params_mut());
        v.extend(self.mapping.down.params_mut());
        v.extend(self.mapping.bn.params_mut());
        v.extend(self.mapping.act.params_mut());
        v.extend(self.mapping.up.params_mut());
        if self.fixed_gate.is_none() {
            v.extend(self.gate.fc.params_mut());
        }
        v
    }
}

/// Four cascaded transfer blocks mapping between two stages' feature spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiCTNetwork {
    blocks: Vec<BiCTBlock>,
    direction: Direction,
    pub source_stage: u32,
    pub target_stage: u32,
}

#[derive(Debug, Clone)]
pub struct NetworkCache {
    blocks: Vec<BlockCache>,
}

impl NetworkCache {
    pub fn blocks(&self) -> &[BlockCache] {
        &self.blocks
    }

    pub fn min_prelu_margin(&self) -> f64 {
        self.blocks.iter().map(BlockCache::min_prelu_margin).fold(f64::INFINITY, f64::min)
    }
}

impl BiCTNetwork {
    pub fn new(cfg: &BictConfig, direction: Direction, source_stage: u32, target_stage: u32, rng: &mut Rng) -> Self {
        let tag = match direction {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        };
        let blocks = (0..CASCADE_DEPTH)
            .map(|i| BiCTBlock::new(&format!("{tag}.block{i}"), cfg, rng))
            .collect();
        Self {
            blocks,
            direction,
            source_stage,
            target_stage,
        }
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn blocks(&self) -> &[BiCTBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [BiCTBlock] {
        &mut self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].dim()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.blocks.iter_mut().for_each(|b| b.set_mode(mode));
    }

    /// Eval-mode transfer (running batch-norm statistics). Pure in its input.
    pub fn transfer(&self, z: &Matrix) -> Result<Matrix> {
        let mut x = self.blocks[0].infer(z)?;
        for block in &self.blocks[1..] {
            x = block.infer(&x)?;
        }
        Ok(x)
    }

    /// Forward pass in the current mode, keeping activations for [`Self::backward`].
    pub fn forward(&mut self, z: &Matrix) -> Result<(Matrix, NetworkCache)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut x = z.clone();
        for block in &mut self.blocks {
            let (y, cache) = block.forward(&x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, NetworkCache { blocks: caches }))
    }

    pub fn backward(&mut self, cache: &NetworkCache, grad_out: &Matrix) -> Result<Matrix> {
        let mut g = grad_out.clone();
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(c, &g)?;
        }
        Ok(g)
    }
}

impl ParamSet for BiCTNetwork {
    fn params(&self) -> Vec<&Parameter> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

/// The forward (old→new) and backward (new→old) networks trained together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPair {
    pub forward: BiCTNetwork,
    pub backward: BiCTNetwork,
}

impl TransferPair {
    /// Independently initialized networks between `old_stage` and `new_stage`.
    pub fn new(cfg: &BictConfig, old_stage: u32, new_stage: u32, rng: &mut Rng) -> Self {
        let mut fwd_rng = rng.split_named("bict.forward");
        let mut bwd_rng = rng.split_named("bict.backward");
        Self {
            forward: BiCTNetwork::new(cfg, Direction::Forward, old_stage, new_stage, &mut fwd_rng),
            backward: BiCTNetwork::new(cfg, Direction::Backward, new_stage, old_stage, &mut bwd_rng),
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.forward.set_mode(mode);
        self.backward.set_mode(mode);
    }
}

impl ParamSet for TransferPair {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.forward.params();
        v.extend(self.backward.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.forward.params_mut();
        v.extend(self.backward.params_mut());
        v
    }
}
