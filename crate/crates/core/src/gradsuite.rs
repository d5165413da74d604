//! Finite-difference verification of every hand-written backward pass, from
//! kernel layers up to the full bidirectional objective.
//!
//! Loss weights are set to 1 in the stack checks so that no term's gradient is
//! hidden beneath another's. Network initializations are redrawn until every
//! PReLU input sits at least `kink_margin` away from zero, since central
//! differences straddling a kink do not estimate a derivative.

use serde::{Deserialize, Serialize};

use crate::baseline::ClassifierHead;
use crate::bict::{BictConfig, TransferPair};
use crate::error::{Error, Result};
use crate::losses::{
    alignment, anti_forget, direction_consistency, objective_step, relation, DirectionBatch, DomainStatistics,
    LossWeights,
};
use crate::numkernel::ops::{normalize_rows, normalize_rows_backward, softmax_rows, softmax_rows_backward};
use crate::numkernel::{
    dot, finite_diff_check, matmul_backward, AffineLayer, BatchNorm, GradCheckReport, Matrix, Mode, PReLU, ParamSet,
    Parameter, Rng,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Kernel,
    Bict,
    Bcd,
    Bad,
    Total,
}

impl Component {
    pub const ALL: [Component; 5] = [Self::Kernel, Self::Bict, Self::Bcd, Self::Bad, Self::Total];

    pub fn name(self) -> &'static str {
        match self {
            Self::Kernel => "kernel",
            Self::Bict => "bict",
            Self::Bcd => "bcd",
            Self::Bad => "bad",
            Self::Total => "total",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck component `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradSuiteConfig {
    pub seeds: u64,
    pub base_seed: u64,
    pub h: f64,
    pub tolerance: f64,
    pub dim: usize,
    pub prototypes: usize,
    pub bottleneck: usize,
    pub ids: usize,
    pub per_id: usize,
    pub kink_margin: f64,
    /// Corrupts one analytic gradient coordinate per check (checker self-test).
    pub inject_fault: bool,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            base_seed: 0,
            h: 1e-5,
            tolerance: 1e-4,
            dim: 4,
            prototypes: 2,
            bottleneck: 2,
            ids: 4,
            per_id: 2,
            kink_margin: 1e-3,
            inject_fault: false,
        }
    }
}

/// Worst result of one named check over all seeds.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub component: Component,
    pub name: &'static str,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub worst_seed: u64,
    pub seeds: u64,
    pub coordinates: usize,
    pub pass: bool,
}

struct Fixture {
    old: Matrix,
    new: Matrix,
    ids: Vec<u32>,
    psi_old: ClassifierHead,
    psi_new: ClassifierHead,
    stats_old: DomainStatistics,
    stats_new: DomainStatistics,
    pair: TransferPair,
}

impl Fixture {
    fn new(cfg: &GradSuiteConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let ids: Vec<u32> = (0..cfg.ids as u32)
            .flat_map(|i| std::iter::repeat_n(i, cfg.per_id))
            .collect();
        let b = ids.len();
        let old = rng.normal_matrix(b, cfg.dim, 1.0);
        let new = rng.normal_matrix(b, cfg.dim, 1.0);
        let bict = BictConfig {
            dim: cfg.dim,
            prototypes: cfg.prototypes,
            bottleneck: cfg.bottleneck,
            fixed_gate: None,
            branch_init_scale: 1.0,
        };
        let pair = kink_free_pair(&bict, &old, &new, cfg.kink_margin, &rng.split_named("pair"))?;
        Ok(Self {
            psi_old: ClassifierHead::new(cfg.dim, cfg.ids, &mut rng),
            psi_new: ClassifierHead::new(cfg.dim, cfg.ids + 1, &mut rng),
            stats_old: DomainStatistics::from_features(&old)?,
            stats_new: DomainStatistics::from_features(&new)?,
            old,
            new,
            ids,
            pair,
        })
    }

    fn batches(&self) -> (DirectionBatch<'_>, DirectionBatch<'_>) {
        (
            DirectionBatch {
                source: &self.old,
                target: &self.new,
                ids: &self.ids,
                classifier: &self.psi_old,
                stats: &self.stats_old,
            },
            DirectionBatch {
                source: &self.new,
                target: &self.old,
                ids: &self.ids,
                classifier: &self.psi_new,
                stats: &self.stats_new,
            },
        )
    }
}

/// Draws train-mode transfer networks whose PReLU inputs on the given
/// batches all have magnitude above `margin`.
pub fn kink_free_pair(cfg: &BictConfig, old: &Matrix, new: &Matrix, margin: f64, rng: &Rng) -> Result<TransferPair> {
    for attempt in 0..1000 {
        let mut pair = TransferPair::new(cfg, 1, 2, &mut rng.split(attempt));
        pair.set_mode(Mode::Train);
        let m_fwd = pair.forward.forward(old)?.1.min_prelu_margin();
        let m_bwd = pair.backward.forward(new)?.1.min_prelu_margin();
        if m_fwd.min(m_bwd) > margin {
            return Ok(pair);
        }
    }
    Err(Error::Evaluation(format!("no initialization with PReLU margin {margin:e} in 1000 draws")))
}

fn checked<M, F>(model: &mut M, h: f64, fault: bool, mut f: F) -> Result<GradCheckReport>
where
    M: ParamSet + ?Sized,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    finite_diff_check(model, h, |m, g| {
        let v = f(m, g)?;
        if g && fault {
            if let Some(p) = m.params_mut().into_iter().next() {
                let d = &mut p.grad.data_mut()[0];
                *d += 0.05 * d.abs() + 1e-3;
            }
        }
        Ok(v)
    })
}

fn unit_weights(mu: [f64; 4]) -> LossWeights {
    LossWeights {
        mu1: mu[0],
        mu2: mu[1],
        mu3: mu[2],
        mu4: mu[3],
    }
}

type CheckFn = fn(&GradSuiteConfig, u64) -> Result<GradCheckReport>;

fn probe(rows: usize, cols: usize, seed: u64) -> Matrix {
    Rng::new(seed ^ 0x5EED).normal_matrix(rows, cols, 1.0)
}

fn kernel_matmul(cfg: &GradSuiteConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut ps = vec![
        Parameter::new("a", rng.normal_matrix(3, 4, 1.0)),
        Parameter::new("b", rng.normal_matrix(4, 2, 1.0)),
    ];
    let w = probe(3, 2, seed);
    checked(&mut ps, cfg.h, cfg.inject_fault, |ps, g| {
        let c = ps[0].value.matmul(&ps[1].value)?;
        if g {
            let (da, db) = matmul_backward(&ps[0].value, &ps[1].value, &w)?;
            ps[0].grad.add_assign(&da)?;
            ps[1].grad.add_assign(&db)?;
        }
        Ok(dot(c.data(), w.data()))
    })
}

fn kernel_layers(cfg: &GradSuiteConfig, seed: u64) -> Result<GradCheckReport> {
    // affine → batch norm → PReLU → softmax(normalize(·))
    let mut rng = Rng::new(seed);
    // no bias: batch norm makes its true gradient exactly zero
    let mut fc = AffineLayer::new("fc", 4, 3, false, &mut rng);
    let mut bn = BatchNorm::new("bn", 3);
    bn.gamma.value = rng.normal_matrix(1, 3, 1.0);
    bn.beta.value = rng.normal_matrix(1, 3, 1.0);
    let mut act = PReLU::new("act", 3, 0.25);
    let mut x = rng.normal_matrix(6, 4, 1.0);
    for _ in 0..1000 {
        let (b, _) = bn.apply(&fc.forward(&x)?)?;
        if b.data().iter().all(|v| v.abs() > cfg.kink_margin) {
            break;
        }
        x = rng.normal_matrix(6, 4, 1.0);
    }
    let w = probe(6, 3, seed);
    struct Stack<'a> {
        fc: &'a mut AffineLayer,
        bn: &'a mut BatchNorm,
        act: &'a mut PReLU,
    }
    impl ParamSet for Stack<'_> {
        fn params(&self) -> Vec<&Parameter> {
            let mut v = self.fc.params();
            v.extend(self.bn.params());
            v.extend(self.act.params());
            v
        }
        fn params_mut(&mut self) -> Vec<&mut Parameter> {
            let mut v = self.fc.params_mut();
            v.extend(self.bn.params_mut());
            v.extend(self.act.params_mut());
            v
        }
    }
    let mut stack = Stack {
        fc: &mut fc,
        bn: &mut bn,
        act: &mut act,
    };
    checked(&mut stack, cfg.h, cfg.inject_fault, |s, g| {
        let h = s.fc.forward(&x)?;
        let (b, bn_cache) = s.bn.apply(&h)?;
        let p = s.act.forward(&b)?;
        let (n, norms) = normalize_rows(&p)?;
        let y = softmax_rows(&n.scaled(2.0));
        if g {
            let dn = softmax_rows_backward(&y, &w).scaled(2.0);
            let dp = normalize_rows_backward(&n, &norms, &dn);
            let db = s.act.backward(&b, &dp);
            let dh = s.bn.backward(&bn_cache, &db);
            s.fc.backward(&x, &dh)?;
        }
        Ok(dot(y.data(), w.data()))
    })
}

fn bict_network(cfg: &GradSuiteConfig, seed: u64) -> Result<GradCheckReport> {
    let mut fx = Fixture::new(cfg, seed)?;
    let w = probe(fx.old.rows(), cfg.dim, seed);
    let x = fx.old.clone();
    checked(&mut fx.pair.forward, cfg.h, cfg.inject_fault, |net, g| {
        let (y, cache) = net.forward(&x)?;
        if g {
            net.backward(&cache, &w)?;
        }
        Ok(dot(y.data(), w.data()))
    })
}

fn loss_wrt_input(
    cfg: &GradSuiteConfig,
    seed: u64,
    loss: impl Fn(&Fixture, &Matrix) -> Result<(f64, Matrix)>,
) -> Result<GradCheckReport> {
    let fx = Fixture::new(cfg, seed)?;
    let mut z = Parameter::new("z_trans", Rng::new(seed).split_named("z").normal_matrix(fx.old.rows(), cfg.dim, 1.0));
    checked(&mut z, cfg.h, cfg.inject_fault, |p, g| {
        let (v, grad) = loss(&fx, &p.value)?;
        if g {
            p.grad.add_assign(&grad)?;
        }
        Ok(v)
    })
}

fn bcd_alignment(cfg: &GradSuiteConfig, seed: u64) -> Result<GradCheckReport> {
    loss_wrt_input(cfg, seed, |fx, z| {
        let l = alignment(&fx.new, z)?;
        Ok((l.value, l.grad))
    })
}

fn bcd_relation(cfg: &GradSuiteConfig, seed: u64) -> Result<GradCheckReport> {
    loss_wrt_input(cfg, seed, |fx, z| {
        let a = relation(&fx.old, z, &fx.ids, false)?;
        let b = relation(&fx.old, z, &fx.ids, true)?;
        let mut g = a.grad;
        g.add_assign(&b.grad)?;
        Ok((a.value + b.value, g))
    })
}

fn bad_anti_forget(cfg: &GradSuiteConfig, seed: u64) -> Result<GradCheckReport> {
    loss_wrt_input(cfg, seed, |fx, z| {
        let l = anti_forget(&fx.psi_old, &fx.old, z, &fx.stats_old)?;
        Ok((l.value, l.grad))
    })
}

fn bad_direction(cfg: &GradSuiteConfig, seed: u64) -> Result<GradCheckReport> {
    loss_wrt_input(cfg, seed, |fx, z| {
        let l = direction_consistency(z, &fx.old, &fx.new)?;
        Ok((l.loss.value, l.loss.grad))
    })
}

fn stack(cfg: &GradSuiteConfig, seed: u64, w: LossWeights) -> Result<GradCheckReport> {
    let fx = Fixture::new(cfg, seed)?;
    let mut pair = fx.pair.clone();
    let (f, b) = fx.batches();
    checked(&mut pair, cfg.h, cfg.inject_fault, |p, g| Ok(objective_step(p, &f, &b, &w, false, g)?.total))
}

fn bcd_stack(cfg: &GradSuiteConfig, seed: u64) -> Result<GradCheckReport> {
    stack(cfg, seed, unit_weights([1.0, 1.0, 0.0, 0.0]))
}

fn bad_stack(cfg: &GradSuiteConfig, seed: u64) -> Result<GradCheckReport> {
    stack(cfg, seed, unit_weights([0.0, 0.0, 1.0, 1.0]))
}

fn total_stack(cfg: &GradSuiteConfig, seed: u64) -> Result<GradCheckReport> {
    stack(cfg, seed, unit_weights([1.0; 4]))
}

const CHECKS: [(Component, &str, CheckFn); 10] = [
    (Component::Kernel, "matmul", kernel_matmul),
    (Component::Kernel, "affine_bn_prelu_softmax", kernel_layers),
    (Component::Bict, "network", bict_network),
    (Component::Bcd, "alignment", bcd_alignment),
    (Component::Bcd, "relation", bcd_relation),
    (Component::Bcd, "stack", bcd_stack),
    (Component::Bad, "anti_forget", bad_anti_forget),
    (Component::Bad, "direction", bad_direction),
    (Component::Bad, "stack", bad_stack),
    (Component::Total, "stack", total_stack),
];

/// Runs every check belonging to `components` (all when empty).
pub fn run_gradcheck(cfg: &GradSuiteConfig, components: &[Component]) -> Result<Vec<CheckResult>> {
    if cfg.seeds == 0 {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    let mut out = Vec::new();
    for (component, name, check) in CHECKS {
        if !components.is_empty() && !components.contains(&component) {
            continue;
        }
        let mut res = CheckResult {
            component,
            name,
            max_rel_err: 0.0,
            worst: None,
            worst_values: (0.0, 0.0),
            worst_seed: cfg.base_seed,
            seeds: cfg.seeds,
            coordinates: 0,
            pass: true,
        };
        for seed in cfg.base_seed..cfg.base_seed + cfg.seeds {
            let r = check(cfg, seed)?;
            res.coordinates += r.coordinates;
            if r.max_rel_err > res.max_rel_err || res.worst.is_none() {
                res.max_rel_err = r.max_rel_err.max(res.max_rel_err);
                res.worst = r.worst;
                res.worst_values = r.worst_values;
                res.worst_seed = seed;
            }
        }
        res.pass = res.max_rel_err < cfg.tolerance;
        out.push(res);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes_and_fault_is_detected() {
        let cfg = GradSuiteConfig {
            seeds: 3,
            ..GradSuiteConfig::default()
        };
        let res = run_gradcheck(&cfg, &[]).unwrap();
        assert_eq!(res.len(), CHECKS.len());
        for r in &res {
            assert!(r.pass, "{r:?}");
        }
        let bad = GradSuiteConfig {
            inject_fault: true,
            seeds: 1,
            ..cfg
        };
        for r in run_gradcheck(&bad, &[Component::Bcd]).unwrap() {
            assert_eq!(r.component, Component::Bcd);
            assert!(!r.pass, "{r:?}");
        }
    }

    #[test]
    fn component_names_round_trip() {
        for c in Component::ALL {
            assert_eq!(Component::parse(c.name()).unwrap(), c);
        }
        assert!(Component::parse("nope").is_err());
    }
}
