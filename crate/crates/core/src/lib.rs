//! Concept ablation in a small prompt-conditioned diffusion model whose
//! concepts have analytic 2-D densities, so every metric has an exact oracle.

pub mod ablation;
pub mod concepts;
pub mod diffusion;
pub mod eval;
pub mod numcore;
pub mod par;
