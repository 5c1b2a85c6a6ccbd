//! Answer metrics, retrieval recall, and compute-vs-quality analysis.

mod bootstrap;
mod fit;
mod metrics;
mod pareto;

use thiserror::Error;

pub use bootstrap::{bootstrap_ci, percentile, ConfidenceInterval};
pub use fit::{fit_linear_at, fit_log_linear, LogLinearFit, B_EPSILON, B_MAX};
pub use metrics::{exact_match, f1, normalize_answer, recall_at_k};
pub use pareto::{pareto_frontier, ScorePoint};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("log-linear fit needs at least 3 distinct token counts, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite input value")]
    NonFinite,
    #[error("bootstrap needs at least one score")]
    NoScores,
    #[error("confidence level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("n_resamples must be positive")]
    NoResamples,
}
