//! Evaluation metrics: Fréchet distance over feature statistics,
//! confusion-matrix segmentation scores, and driving scores.
//!
//! All accumulators (`FeatureStats`, `ConfusionMatrix`) merge exactly, so
//! per-shard results can be combined after a parallel map.

mod driving;
mod fd;
mod segmentation;

pub use driving::{
    aggregate_driving, infraction_score, load_route_log, parse_route_log, DrivingMeans,
    DrivingSummary, InfractionEvent, PenaltyTable, RouteResult,
};
pub use fd::{accumulate_stats, frechet_distance, matrix_sqrt_psd, FeatureStats};
pub use segmentation::{mf1, miou, update_confusion, ConfusionMatrix, EmptyClass};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least 2 samples for a covariance, have {0}")]
    TooFewSamples(u64),
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("eigendecomposition did not converge")]
    EigenFailure,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("mask shapes differ")]
    ShapeMismatch,
    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: u32, classes: usize },
    #[error("every class is empty")]
    AllClassesEmpty,
    #[error("unknown infraction kind '{0}'")]
    UnknownEventKind(String),
    #[error("no input")]
    EmptyInput,
    #[error("{0}")]
    InvalidInput(String),
}
