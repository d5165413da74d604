//! Dense fp64 kernel: matrices, layers with hand-written backward passes, a
//! seeded PRNG, SGD and a finite-difference gradient checker.

mod gradcheck;
mod layers;
mod matrix;
pub mod ops;
mod optim;
mod rng;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use layers::{AffineLayer, BatchNorm, BatchNormCache, Mode, PReLU, ParamSet, Parameter};
pub use matrix::{dot, matmul_backward, Matrix};
pub use ops::{cosine_similarity, l2_normalize, softmax};
pub use optim::{Sgd, SgdConfig};
pub use rng::Rng;
