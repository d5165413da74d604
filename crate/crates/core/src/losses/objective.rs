//! Bidirectional combination of the per-direction terms.

use serde::{Deserialize, Serialize};

use super::anti_forget::{anti_forget, direction_consistency, DomainStatistics};
use super::relation::{alignment, relation};
use super::{LossValue, LossWeights};
use crate::baseline::ClassifierHead;
use crate::bict::{BiCTNetwork, TransferPair};
use crate::error::{dim_err, Result};
use crate::numkernel::Matrix;

/// Frozen inputs for one transfer direction over a single batch.
#[derive(Debug, Clone, Copy)]
pub struct DirectionBatch<'a> {
    /// Features of the source model (the one being transferred from).
    pub source: &'a Matrix,
    /// Features of the target model on the same samples.
    pub target: &'a Matrix,
    pub ids: &'a [u32],
    /// Classifier and statistics of the source domain.
    pub classifier: &'a ClassifierHead,
    pub stats: &'a DomainStatistics,
}

/// The four per-direction terms, each with its gradient w.r.t. the transferred features.
#[derive(Debug, Clone)]
pub struct DirectionTerms {
    pub alignment: LossValue,
    pub relation: LossValue,
    pub anti_forget: LossValue,
    pub direction: LossValue,
    pub skipped_rows: usize,
}

impl DirectionTerms {
    pub fn evaluate(batch: &DirectionBatch<'_>, z_trans: &Matrix, renormalize: bool) -> Result<Self> {
        if batch.ids.len() != z_trans.rows() {
            return Err(dim_err(
                "direction_terms",
                format!("{} labels for {} rows", batch.ids.len(), z_trans.rows()),
            ));
        }
        let dc = direction_consistency(z_trans, batch.source, batch.target)?;
        Ok(Self {
            alignment: alignment(batch.target, z_trans)?,
            relation: relation(batch.source, z_trans, batch.ids, renormalize)?,
            anti_forget: anti_forget(batch.classifier, batch.source, z_trans, batch.stats)?,
            direction: dc.loss,
            skipped_rows: dc.skipped_rows,
        })
    }

    /// Weighted gradient of this direction's share of the total objective.
    fn weighted_grad(&self, w: &LossWeights) -> Matrix {
        let mut g = self.alignment.grad.scaled(0.5 * w.mu1);
        for (term, mu) in [(&self.relation, w.mu2), (&self.anti_forget, w.mu3), (&self.direction, w.mu4)] {
            for (a, b) in g.data_mut().iter_mut().zip(term.grad.data()) {
                *a += 0.5 * mu * b;
            }
        }
        g
    }

    fn values(&self) -> TermValues {
        TermValues {
            alignment: self.alignment.value,
            relation: self.relation.value,
            anti_forget: self.anti_forget.value,
            direction: self.direction.value,
        }
    }
}

fn mean2(a: f64, b: f64) -> f64 {
    (a + b) / 2.0
}

pub fn bcd_loss(w: &LossWeights, fwd: &DirectionTerms, bwd: &DirectionTerms) -> f64 {
    w.mu1 * mean2(fwd.alignment.value, bwd.alignment.value) + w.mu2 * mean2(fwd.relation.value, bwd.relation.value)
}

pub fn bad_loss(w: &LossWeights, fwd: &DirectionTerms, bwd: &DirectionTerms) -> f64 {
    w.mu3 * mean2(fwd.anti_forget.value, bwd.anti_forget.value)
        + w.mu4 * mean2(fwd.direction.value, bwd.direction.value)
}

pub fn total_objective(w: &LossWeights, fwd: &DirectionTerms, bwd: &DirectionTerms) -> f64 {
    bcd_loss(w, fwd, bwd) + bad_loss(w, fwd, bwd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub alignment: f64,
    pub relation: f64,
    pub anti_forget: f64,
    pub direction: f64,
}

/// Scalar summary of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub bcd: f64,
    pub bad: f64,
    pub total: f64,
    pub forward: TermValues,
    pub backward: TermValues,
}

fn run_direction(
    net: &mut BiCTNetwork,
    batch: &DirectionBatch<'_>,
    w: &LossWeights,
    renormalize: bool,
    with_grad: bool,
) -> Result<DirectionTerms> {
    let (z_trans, cache) = net.forward(batch.source)?;
    let terms = DirectionTerms::evaluate(batch, &z_trans, renormalize)?;
    if with_grad {
        net.backward(&cache, &terms.weighted_grad(w))?;
    }
    Ok(terms)
}

/// Evaluates the total objective on one batch through both networks in their
/// current mode. With `with_grad`, parameter gradients are accumulated.
pub fn objective_step(
    pair: &mut TransferPair,
    fwd: &DirectionBatch<'_>,
    bwd: &DirectionBatch<'_>,
    w: &LossWeights,
    renormalize: bool,
    with_grad: bool,
) -> Result<ObjectiveBreakdown> {
    let f = run_direction(&mut pair.forward, fwd, w, renormalize, with_grad)?;
    let b = run_direction(&mut pair.backward, bwd, w, renormalize, with_grad)?;
    Ok(ObjectiveBreakdown {
        bcd: bcd_loss(w, &f, &b),
        bad: bad_loss(w, &f, &b),
        total: total_objective(w, &f, &b),
        forward: f.values(),
        backward: b.values(),
    })
}
