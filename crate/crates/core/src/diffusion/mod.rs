//! Three-level latent diffusion: the forward process, per-level denoisers
//! with the coarse-to-fine conditioning chain, classifier-free guidance and
//! DDIM sampling.

mod model;
mod schedule;

use thiserror::Error;

pub use model::{
    condition_token_count, prepare_graph, sample_hierarchical, train_diffusion, DenoiserConfig, DiffusionConfig,
    DiffusionTrainConfig, DiffusionTrainReport, GraphInput, LatentShape, HierarchicalDenoiser, HierarchicalSample, SamplerConfig,
    VaeSet,
};
pub use schedule::{
    cfg_combine, cfg_combine_scalar, ddim_loop, ddim_step, gaussian_like, q_sample, q_sample_tensor, schedule_linear,
    NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS,
};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule range: {0}")]
    InvalidRange(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] crate::graphreason::GraphError),
    #[error(transparent)]
    Embed(#[from] crate::embed::EmbedError),
    #[error(transparent)]
    Vae(#[from] crate::motionvae::VaeError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}
