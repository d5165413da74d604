//! Stage-by-stage orchestration of baseline training, transfer training,
//! knowledge-change estimation, model fusion and gallery maintenance.

mod config;
mod fusion;
mod runner;
mod transfer;

pub use config::{ConfigIssue, EpsilonScale, ExperimentConfig, FusionConfig, OutputConfig, RunMode, TransferConfig};
pub use fusion::{compute_epsilon, dff_fuse_models, EpsilonValue};
pub use runner::{
    run_arms, run_experiment, stream_for, Checkpoint, LifelongState, RawVault, RunOutcome, RunReport, StageRecord,
    StageTimings,
};
pub use transfer::{train_transfer_networks, TransferEpoch, TransferOutcome};
