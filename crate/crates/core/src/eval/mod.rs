//! Metrics over analytic concept densities and the evaluation report.

mod metrics;
mod report;

pub use metrics::{
    bayes_accuracy, bayes_wins, copy_rate, mean_log_density, mmd_null_quantile, mmd_poly, mmd_poly_brute, poly_kernel,
    similarity, DEFAULT_SIGMA_SIM,
};
pub use report::{
    concept_accuracy, concept_prompts, concept_score, evaluation_plan, full_report, memorization_rate, robustness_eval,
    sample_concept, CompositionReport, ConceptRef, ConceptReport, EvalReport, EvalRole, MemorizationReport,
    MetricConfig, RobustPoint,
};

use crate::concepts::ConceptError;
use crate::diffusion::DiffusionError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation configuration: {0}")]
    Config(String),
    #[error("degenerate density: {0}")]
    Degenerate(String),
    #[error("lineage mismatch: {0} (pass --force to override)")]
    Lineage(String),
    #[error("invalid report: {0}")]
    Invalid(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Concept(ConceptError),
}

impl From<ConceptError> for EvalError {
    fn from(e: ConceptError) -> Self {
        match e {
            ConceptError::Degenerate(s) => EvalError::Degenerate(s),
            other => EvalError::Concept(other),
        }
    }
}
