//! Retrieval metrics and numeric checks of the error-accumulation and
//! fusion-weight arguments.

mod metrics;
mod theory;

pub use metrics::{
    average_forgetting, average_precision, evaluate_features, evaluate_stage, rank1, DatasetMetrics, EpsilonEntry,
    MetricCell, MetricsReport, QueryOutcome, QuerySet, RankEvalCase, StageEval,
};
pub use theory::{
    closed_form_gap, error_accumulation_sim, error_sweep, fusion_grid_sim, fusion_sweep, ErrorSimConfig,
    ErrorSimResult, ErrorSweep, ErrorTrial, FusionGrid, FusionPairResult, FusionSweep, SweepConfig, TheoryReport,
    TrialKind, Verdict, THEORY_TOL,
};
