use std::fmt;

use ablate_core::ablation::AblationError;
use ablate_core::concepts::ConceptError;
use ablate_core::diffusion::DiffusionError;
use ablate_core::eval::EvalError;

pub type Result<T, E = anyhow::Error> = std::result::Result<T, E>;

/// Bad flags, config or inputs; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage, configuration and provenance errors anywhere in the chain, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<AblationError>(),
                Some(AblationError::Config(_) | AblationError::Provenance(_))
            )
            || matches!(e.downcast_ref::<EvalError>(), Some(EvalError::Config(_) | EvalError::Lineage(_)))
            || matches!(e.downcast_ref::<DiffusionError>(), Some(DiffusionError::Config(_) | DiffusionError::Format(_)))
            || matches!(e.downcast_ref::<ConceptError>(), Some(ConceptError::UnknownConcept(_)))
    });
    if config {
        2
    } else {
        1
    }
}
