//! Concept vocabulary, analytic ground-truth densities, prompt templating and
//! ablation datasets.

mod dataset;
mod density;
mod map;
mod prompts;
mod vocab;

pub use dataset::{
    build_ablation_dataset, build_memorization_dataset, AblationDataset, MemorizationOptions, Provenance, RegPair,
    Source, Tuple,
};
pub use density::{mixture_of, style_matrix, Component, Gaussian2, Mat2, Mixture};
pub use map::{default_concept_map, ConceptKind, ConceptMap, ConceptSpec, Relation, INSTANCE_SIGMA, MEMO_JITTER};
pub use prompts::{fixed_prompts, make_prompts, to_target_prompt, PromptPool, Task};
pub use vocab::{Prompt, Role, Token, Vocab, PROMPT_LEN};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConceptError {
    #[error("unknown concept or token {0:?}")]
    UnknownConcept(String),
    #[error("prompt already contains target {0:?}")]
    AlreadyTarget(String),
    #[error("degenerate density: {0}")]
    Degenerate(String),
    #[error("{0}")]
    Invalid(String),
}
