//! Error-accumulation recursion and the fusion-weight discrepancy surface.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Rng;

/// Tolerance for every exact-equality claim checked here.
pub const THEORY_TOL: f64 = 1e-12;

/// One configuration of the error-accumulation model over stages `1..=stages`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSimConfig {
    pub stages: usize,
    /// Error of the first-stage model.
    pub e_b: f64,
    /// Transfer error of stages `2..=stages`.
    pub e_c: Vec<f64>,
    /// Fusion weight of stages `2..=stages`.
    pub epsilon: Vec<f64>,
}

impl ErrorSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::Config("error simulation needs at least one stage".into()));
        }
        if self.e_c.len() + 1 != self.stages || self.epsilon.len() + 1 != self.stages {
            return Err(Error::Config(format!(
                "{} stages need {} transfer errors and weights, got {} and {}",
                self.stages,
                self.stages - 1,
                self.e_c.len(),
                self.epsilon.len()
            )));
        }
        if !(self.e_b.is_finite() && self.e_b >= 0.0) {
            return Err(Error::Config(format!("E_b must be >= 0, got {}", self.e_b)));
        }
        if let Some(c) = self.e_c.iter().find(|c| !(c.is_finite() && **c >= 1.0)) {
            return Err(Error::Config(format!("E_c must be >= 1, got {c}")));
        }
        if let Some(e) = self.epsilon.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::Config(format!("epsilon must lie in [0, 1], got {e}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSimResult {
    /// Error of pure chained transfer.
    pub e_f: f64,
    /// Error with feature fusion at every stage.
    pub e_d: f64,
    pub diff: f64,
}

/// Runs both error recursions to the final stage.
///
/// `E_F` chains every transfer. `E_D` mixes, at each stage, the previous fused
/// error with the transfer applied to the pure chain.
pub fn error_accumulation_sim(cfg: &ErrorSimConfig) -> Result<ErrorSimResult> {
    cfg.validate()?;
    let mut chain = cfg.e_b;
    let mut fused = cfg.e_b;
    for (&c, &eps) in cfg.e_c.iter().zip(&cfg.epsilon) {
        let moved = c * chain;
        fused = eps * fused + (1.0 - eps) * moved;
        chain = moved;
    }
    Ok(ErrorSimResult {
        e_f: chain,
        e_d: fused,
        diff: chain - fused,
    })
}

/// Closed-form gap: sum over i of (ε_T⋯ε_i)·(E_c^{i−1}⋯E_b)·(E_c^i − 1).
pub fn closed_form_gap(cfg: &ErrorSimConfig) -> Result<f64> {
    cfg.validate()?;
    let n = cfg.e_c.len();
    let mut prefix = Vec::with_capacity(n);
    let mut p = cfg.e_b;
    for &c in &cfg.e_c {
        prefix.push(p);
        p *= c;
    }
    let mut total = 0.0;
    for i in 0..n {
        let weight: f64 = cfg.epsilon[i..].iter().product();
        total += weight * prefix[i] * (cfg.e_c[i] - 1.0);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

impl Verdict {
    fn of(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub trials: usize,
    pub max_stages: usize,
    pub pairs: usize,
    pub grid: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            max_stages: 8,
            pairs: 100,
            grid: 21,
            feature_dim: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    Random,
    UnitTransfer,
    NoFusion,
    LastStageUnfused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrial {
    pub trial: usize,
    pub kind: TrialKind,
    pub stages: usize,
    pub result: ErrorSimResult,
    pub closed_form: f64,
    /// Smallest change of the gap when one E_c is nudged upward.
    pub min_probe_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSweep {
    pub trials: Vec<ErrorTrial>,
    pub min_diff: f64,
    pub max_closed_form_err: f64,
    /// Trials with all E_c = 1 or all ε = 0 whose gap is nonzero.
    pub equality_violations: usize,
    /// Random trials (all E_c > 1, all ε > 0) whose closed-form gap is not positive.
    pub strictness_violations: usize,
    /// Trials with a zero gap outside the two equality families.
    pub other_zero_gaps: usize,
    pub monotone_violations: usize,
    pub verdict: Verdict,
}

const PROBE_STEP: f64 = 1e-3;

fn draw_trial(rng: &mut Rng, kind: TrialKind, max_stages: usize) -> ErrorSimConfig {
    let stages = 2 + rng.below(max_stages - 1);
    let n = stages - 1;
    let e_b = rng.uniform_range(0.1, 2.0);
    let mut e_c: Vec<f64> = (0..n).map(|_| rng.uniform_range(1.0, 2.0)).collect();
    // keep weights strictly inside (0, 1] for the random family
    let mut epsilon: Vec<f64> = (0..n).map(|_| 1.0 - rng.uniform()).collect();
    match kind {
        TrialKind::Random => {}
        TrialKind::UnitTransfer => e_c.fill(1.0),
        TrialKind::NoFusion => epsilon.fill(0.0),
        TrialKind::LastStageUnfused => *epsilon.last_mut().expect("n >= 1") = 0.0,
    }
    ErrorSimConfig {
        stages,
        e_b,
        e_c,
        epsilon,
    }
}

/// Random configurations with the two equality families and a last-stage-unfused
/// family mixed in.
pub fn error_sweep(cfg: &SweepConfig) -> Result<ErrorSweep> {
    if cfg.max_stages < 2 {
        return Err(Error::Config("max_stages must be >= 2".into()));
    }
    let mut rng = Rng::new(cfg.seed).split_named("theory.error");
    let mut trials = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let kind = match trial % 10 {
            0 => TrialKind::UnitTransfer,
            1 => TrialKind::NoFusion,
            2 => TrialKind::LastStageUnfused,
            _ => TrialKind::Random,
        };
        let sim = draw_trial(&mut rng, kind, cfg.max_stages);
        let result = error_accumulation_sim(&sim)?;
        let closed_form = closed_form_gap(&sim)?;
        let mut min_probe_delta = f64::INFINITY;
        for i in 0..sim.e_c.len() {
            let mut bumped = sim.clone();
            bumped.e_c[i] += PROBE_STEP;
            min_probe_delta = min_probe_delta.min(error_accumulation_sim(&bumped)?.diff - result.diff);
        }
        trials.push(ErrorTrial {
            trial,
            kind,
            stages: sim.stages,
            result,
            closed_form,
            min_probe_delta,
        });
    }

    let zero = |t: &ErrorTrial| t.result.diff.abs() <= THEORY_TOL;
    let min_diff = trials.iter().map(|t| t.result.diff).fold(f64::INFINITY, f64::min);
    let max_closed_form_err = trials
        .iter()
        .map(|t| (t.result.diff - t.closed_form).abs())
        .fold(0.0, f64::max);
    let equality_violations = trials
        .iter()
        .filter(|t| matches!(t.kind, TrialKind::UnitTransfer | TrialKind::NoFusion) && !zero(t))
        .count();
    let strictness_violations = trials
        .iter()
        .filter(|t| t.kind == TrialKind::Random && t.closed_form <= 0.0)
        .count();
    let other_zero_gaps = trials
        .iter()
        .filter(|t| matches!(t.kind, TrialKind::Random | TrialKind::LastStageUnfused) && zero(t))
        .count();
    let monotone_violations = trials.iter().filter(|t| t.min_probe_delta < -THEORY_TOL).count();
    let verdict = if trials.is_empty() {
        Verdict::Skipped
    } else {
        Verdict::of(
            min_diff >= -THEORY_TOL
                && max_closed_form_err <= THEORY_TOL
                && equality_violations == 0
                && strictness_violations == 0
                && monotone_violations == 0,
        )
    };
    Ok(ErrorSweep {
        trials,
        min_diff,
        max_closed_form_err,
        equality_violations,
        strictness_violations,
        other_zero_gaps,
        monotone_violations,
        verdict,
    })
}

/// Discrepancy `‖(α1−α2)·F_old + (α2−α1)·F_new‖ + C` over a square weight grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionGrid {
    pub alphas: Vec<f64>,
    /// Row-major: `values[i * n + j]` is the value at `(alphas[i], alphas[j])`.
    pub values: Vec<f64>,
    pub constant: f64,
    pub min: f64,
    pub argmin: Vec<(usize, usize)>,
}

impl FusionGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.alphas.len() + j]
    }

    pub fn argmin_is_diagonal(&self) -> bool {
        let n = self.alphas.len();
        self.argmin.len() == n && self.argmin.iter().all(|(i, j)| i == j)
    }
}

pub fn fusion_grid_sim(alphas: &[f64], f_old: &[f64], f_new: &[f64], constant: f64) -> Result<FusionGrid> {
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Config("fusion weights must lie in [0, 1]".into()));
    }
    if f_old.len() != f_new.len() {
        return Err(crate::error::dim_err(
            "fusion_grid_sim",
            format!("{} vs {}", f_old.len(), f_new.len()),
        ));
    }
    let n = alphas.len();
    let mut values = Vec::with_capacity(n * n);
    for &a1 in alphas {
        for &a2 in alphas {
            let norm = f_old
                .iter()
                .zip(f_new)
                .map(|(o, w)| {
                    let v = (a1 - a2) * o + (a2 - a1) * w;
                    v * v
                })
                .sum::<f64>()
                .sqrt();
            values.push(norm + constant);
        }
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let argmin = (0..n * n)
        .filter(|&k| values[k] <= min + THEORY_TOL)
        .map(|k| (k / n, k % n))
        .collect();
    Ok(FusionGrid {
        alphas: alphas.to_vec(),
        values,
        constant,
        min,
        argmin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionPairResult {
    pub pair: usize,
    pub constant: f64,
    pub min: f64,
    pub argmin_size: usize,
    pub diagonal_argmin: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSweep {
    pub pairs: Vec<FusionPairResult>,
    pub off_diagonal_pairs: usize,
    pub below_constant: usize,
    pub verdict: Verdict,
}

pub fn fusion_sweep(cfg: &SweepConfig) -> Result<FusionSweep> {
    if cfg.grid < 2 {
        return Err(Error::Config("fusion grid needs at least 2 points per axis".into()));
    }
    let alphas: Vec<f64> = (0..cfg.grid).map(|k| k as f64 / (cfg.grid - 1) as f64).collect();
    let mut rng = Rng::new(cfg.seed).split_named("theory.fusion");
    let mut pairs = Vec::with_capacity(cfg.pairs);
    for pair in 0..cfg.pairs {
        let f_old = rng.normal_vec(cfg.feature_dim, 1.0);
        let f_new = rng.normal_vec(cfg.feature_dim, 1.0);
        let constant = rng.uniform();
        let g = fusion_grid_sim(&alphas, &f_old, &f_new, constant)?;
        pairs.push(FusionPairResult {
            pair,
            constant,
            min: g.min,
            argmin_size: g.argmin.len(),
            diagonal_argmin: g.argmin_is_diagonal(),
        });
    }
    let off_diagonal_pairs = pairs.iter().filter(|p| !p.diagonal_argmin).count();
    let below_constant = pairs.iter().filter(|p| p.min < p.constant - THEORY_TOL).count();
    let verdict = if pairs.is_empty() {
        Verdict::Skipped
    } else {
        Verdict::of(off_diagonal_pairs == 0 && below_constant == 0)
    };
    Ok(FusionSweep {
        pairs,
        off_diagonal_pairs,
        below_constant,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config: SweepConfig,
    pub error: ErrorSweep,
    pub fusion: FusionSweep,
}

impl TheoryReport {
    pub fn run(cfg: &SweepConfig) -> Result<Self> {
        let skipped = cfg.trials == 0;
        let error = error_sweep(cfg)?;
        let fusion = if skipped {
            FusionSweep {
                pairs: Vec::new(),
                off_diagonal_pairs: 0,
                below_constant: 0,
                verdict: Verdict::Skipped,
            }
        } else {
            fusion_sweep(cfg)?
        };
        Ok(Self {
            config: *cfg,
            error,
            fusion,
        })
    }

    pub fn passed(&self) -> bool {
        self.error.verdict != Verdict::Fail && self.fusion.verdict != Verdict::Fail
    }

    pub fn error_csv(&self) -> String {
        let mut out = String::from("trial,kind,stages,e_f,e_d,diff,closed_form,min_probe_delta\n");
        for t in &self.error.trials {
            let kind = serde_json::to_value(t.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                t.trial, kind, t.stages, t.result.e_f, t.result.e_d, t.result.diff, t.closed_form, t.min_probe_delta
            ));
        }
        out
    }

    pub fn fusion_csv(&self) -> String {
        let mut out = String::from("pair,constant,min,argmin_size,diagonal_argmin\n");
        for p in &self.fusion.pairs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.pair, p.constant, p.min, p.argmin_size, p.diagonal_argmin
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(e_b: f64, e_c: &[f64], eps: &[f64]) -> ErrorSimConfig {
        ErrorSimConfig {
            stages: e_c.len() + 1,
            e_b,
            e_c: e_c.to_vec(),
            epsilon: eps.to_vec(),
        }
    }

    #[test]
    fn two_stage_expansion() {
        // E_F = c·b, E_D = ε·b + (1−ε)·c·b, gap = ε·b·(c−1)
        let (b, c, e) = (1.5, 1.25, 0.4);
        let r = error_accumulation_sim(&sim(b, &[c], &[e])).unwrap();
        assert!((r.e_f - c * b).abs() < 1e-15);
        assert!((r.e_d - (e * b + (1.0 - e) * c * b)).abs() < 1e-15);
        assert!((r.diff - e * b * (c - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn three_stage_expansion() {
        let (b, c2, c3, e2, e3) = (0.7, 1.3, 1.8, 0.25, 0.6);
        let r = error_accumulation_sim(&sim(b, &[c2, c3], &[e2, e3])).unwrap();
        let e_d = e3 * (e2 * b + (1.0 - e2) * c2 * b) + (1.0 - e3) * c3 * c2 * b;
        let gap = e3 * e2 * b * (c2 - 1.0) + e3 * c2 * b * (c3 - 1.0);
        assert!((r.e_d - e_d).abs() < 1e-14);
        assert!((r.diff - gap).abs() < 1e-14);
        assert!((closed_form_gap(&sim(b, &[c2, c3], &[e2, e3])).unwrap() - gap).abs() < 1e-14);
    }

    #[test]
    fn equality_cases() {
        let r = error_accumulation_sim(&sim(1.2, &[1.0, 1.0, 1.0], &[0.3, 0.9, 0.5])).unwrap();
        assert!(r.diff.abs() <= THEORY_TOL);
        let r = error_accumulation_sim(&sim(1.2, &[1.4, 1.9], &[0.0, 0.0])).unwrap();
        assert_eq!(r.e_d, r.e_f);
        assert_eq!(r.diff, 0.0);
    }

    #[test]
    fn last_stage_unfused_also_closes_the_gap() {
        let c = sim(1.0, &[1.5, 1.5], &[0.8, 0.0]);
        assert!(error_accumulation_sim(&c).unwrap().diff.abs() <= THEORY_TOL);
    }

    #[test]
    fn config_validation() {
        assert!(error_accumulation_sim(&sim(1.0, &[0.9], &[0.5])).is_err());
        assert!(error_accumulation_sim(&sim(1.0, &[1.1], &[1.5])).is_err());
        assert!(error_accumulation_sim(&sim(-1.0, &[1.1], &[0.5])).is_err());
        let bad = ErrorSimConfig {
            stages: 3,
            e_b: 1.0,
            e_c: vec![1.0],
            epsilon: vec![0.5],
        };
        assert!(error_accumulation_sim(&bad).is_err());
    }

    #[test]
    fn default_sweep_passes() {
        let s = error_sweep(&SweepConfig::default()).unwrap();
        assert_eq!(s.trials.len(), 1000);
        assert_eq!(s.verdict, Verdict::Pass, "{s:?}");
        assert!(s.min_diff >= -THEORY_TOL);
        assert!(s.other_zero_gaps >= 100);
    }

    #[test]
    fn fusion_examples() {
        let alphas: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let g = fusion_grid_sim(&alphas, &[1.0, 2.0], &[0.0, -1.0], 0.3).unwrap();
        for i in 0..alphas.len() {
            assert_eq!(g.at(i, i), 0.3);
        }
        let d = (1.0f64 + 9.0).sqrt();
        for i in 0..alphas.len() {
            for j in 0..alphas.len() {
                let want = (alphas[i] - alphas[j]).abs() * d + 0.3;
                assert!((g.at(i, j) - want).abs() < 1e-12);
            }
        }
        assert!(g.argmin_is_diagonal());
        assert!(fusion_grid_sim(&[1.5], &[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn fusion_sweep_passes() {
        let s = fusion_sweep(&SweepConfig::default()).unwrap();
        assert_eq!(s.pairs.len(), 100);
        assert_eq!(s.verdict, Verdict::Pass);
    }

    #[test]
    fn zero_trials_are_skipped() {
        let r = TheoryReport::run(&SweepConfig {
            trials: 0,
            ..SweepConfig::default()
        })
        .unwrap();
        assert_eq!(r.error.verdict, Verdict::Skipped);
        assert_eq!(r.fusion.verdict, Verdict::Skipped);
        assert!(r.passed());
        assert_eq!(r.error_csv().lines().count(), 1);
    }
}
