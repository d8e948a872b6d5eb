//! Noise schedule, conditional denoiser, training loss, ancestral sampling,
//! pretraining and checkpoints.

mod checkpoint;
mod loss;
pub mod net;
mod pretrain;
mod sampler;
mod schedule;

pub use checkpoint::{json_hash, sha256_hex, Checkpoint, CheckpointConfig, CHECKPOINT_FORMAT};
pub use loss::{diffusion_loss, diffusion_loss_grad, eps_loss_node, mean_sq_dist, NoiseDraw};
pub use net::{denoise, embedding_rows, BoundParams, Cond, ModelConfig};
pub use pretrain::{heldout_loss, pretrain, training_mix, MixEntry, PairSampler, PretrainConfig};
pub use sampler::{sample_ancestral, sample_prompts, EpsModel, GaussianEps, NetEps, RowCond, CHUNK, DIVERGENCE_BOUND};
pub use schedule::{NoiseSchedule, ScheduleConfig};

use crate::concepts::ConceptError;
use crate::numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sampler diverged at row {row} (t = {t})")]
    Diverged { row: usize, t: usize },
    #[error("training failed at step {step}: {source}")]
    Training { step: usize, source: NumError },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
}
