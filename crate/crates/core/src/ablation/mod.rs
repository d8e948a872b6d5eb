//! Ablation objectives, parameter subsets and the fine-tuning loop.

mod objective;
mod train;

pub use objective::{
    combined_node, combined_objective, kl_factor, matching_loss, matching_node, model_based_node, select_params,
    weight_penalty_node, Batch, LossParts, Objective, ObjectiveKind, SubsetKind, SubsetMask, BASELINE_PENALTY,
};
pub use train::{
    ablate_run, composition_dataset, compositional_ablate, multi_concept_ablate, trace_csv, union_dataset,
    AblateConfig, AblationOutcome, LossRow, Probe,
};

use crate::concepts::ConceptError;
use crate::diffusion::DiffusionError;
use crate::numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error("invalid ablation configuration: {0}")]
    Config(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error("ablation failed at step {step}: {source}")]
    Training { step: usize, source: NumError },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
}
