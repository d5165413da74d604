//! Training objective for the transfer networks.
//!
//! Every term consumes l2-normalized features and is a nonnegative penalty.
//! Each `*` function returning [`LossValue`] also yields the gradient with
//! respect to its transferred-feature argument.

mod anti_forget;
mod objective;
mod relation;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub use anti_forget::{
    anti_forget, anti_forget_logits, anti_forget_loss, direction_consistency, direction_consistency_loss,
    DirectionValue, DomainStatistics, IdentityLogits, STD_FLOOR,
};
pub use objective::{
    bad_loss, bcd_loss, objective_step, total_objective, DirectionBatch, DirectionTerms, ObjectiveBreakdown,
    TermValues,
};
pub use relation::{
    affinity, alignment, alignment_loss, mask_normalize, relation, relation_loss, AffinityMatrix, MaskedAffinity,
};

/// Floor on the denominator distribution inside KL logarithms.
pub const KL_FLOOR: f64 = 1e-12;

/// A scalar loss and its gradient with respect to one input matrix.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Matrix,
}

/// Weights of alignment, relation, anti-forgetting and direction terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub mu4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu1: 100.0,
            mu2: 1.0,
            mu3: 7e-2,
            mu4: 5e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu1", self.mu1), ("mu2", self.mu2), ("mu3", self.mu3), ("mu4", self.mu4)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}
