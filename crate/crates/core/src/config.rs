//! Experiment configuration shared by the CLI, the service and the tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{DenoiserConfig, DiffusionConfig, DiffusionTrainConfig, LatentShape, SamplerConfig};
use crate::graphreason::GatConfig;
use crate::metrics::EvaluatorConfig;
use crate::motionrep::DatasetConfig;
use crate::motionvae::{VaeConfig, VaeTrainConfig};
use crate::nn::OptimConfig;
use crate::semgraph::Level;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
}

/// How generated motions are scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub repeats: usize,
    pub r_precision_batch: usize,
    /// Subset size X_d; capped at half the generated set.
    pub diversity_subset: usize,
    /// Prompts used for MModality; 0 skips it.
    pub mmodality_texts: usize,
    pub mmodality_pairs: usize,
    /// Length of generated motions when none is requested.
    pub frames_per_action: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            repeats: crate::metrics::REPEATS,
            r_precision_batch: crate::metrics::R_PRECISION_BATCH,
            diversity_subset: crate::metrics::DIVERSITY_SUBSET,
            mmodality_texts: 20,
            mmodality_pairs: crate::metrics::MMODALITY_PAIRS,
            frames_per_action: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Motion, action, specific.
    pub vae: [VaeConfig; 3],
    pub vae_train: VaeTrainConfig,
    pub denoiser: DenoiserConfig,
    pub gat: GatConfig,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cond_dropout: f64,
    pub diffusion_train: DiffusionTrainConfig,
    pub sampler: SamplerConfig,
    pub evaluator: EvaluatorConfig,
    pub protocol: EvalProtocol,
    /// Registered name of the text encoder feeding the graph nodes.
    pub encoder: String,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Single-CPU defaults.
    pub fn desk() -> Self {
        let base = DiffusionConfig::new([LatentShape { tokens: 1, dim: 1 }; 3]);
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            vae: [VaeConfig::desk(Level::Motion), VaeConfig::desk(Level::Action), VaeConfig::desk(Level::Specific)],
            vae_train: VaeTrainConfig::default(),
            denoiser: base.denoiser,
            gat: base.gat,
            schedule_steps: base.schedule_steps,
            beta_start: base.beta_start,
            beta_end: base.beta_end,
            cond_dropout: base.cond_dropout,
            diffusion_train: DiffusionTrainConfig::default(),
            sampler: SamplerConfig::default(),
            evaluator: EvaluatorConfig::default(),
            protocol: EvalProtocol::default(),
            encoder: crate::embed::HashEncoder::NAME.into(),
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    /// Tiny settings that exercise every stage in seconds.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.dataset.size = 48;
        for v in &mut c.vae {
            v.width = 16;
            v.ff = 32;
            v.layers = 1;
        }
        c.vae_train = VaeTrainConfig {
            steps: 4,
            batch: 8,
            optim: OptimConfig { steps: 4, warmup: 1, ..c.vae_train.optim },
            ..c.vae_train
        };
        c.denoiser = DenoiserConfig { width: 16, layers: 1, heads: 2, ff: 32, max_actions: 4 };
        c.gat.dim = 16;
        c.diffusion_train = DiffusionTrainConfig {
            steps: 4,
            batch: 8,
            optim: OptimConfig { steps: 4, warmup: 1, ..c.diffusion_train.optim },
            ..c.diffusion_train
        };
        c.sampler.steps = [2, 2, 2];
        c.protocol = EvalProtocol { repeats: 2, r_precision_batch: 4, diversity_subset: 4, mmodality_texts: 2, mmodality_pairs: 2, ..c.protocol };
        c.evaluator = EvaluatorConfig { steps: 4, batch: 8, dim: 8, ff: 16, layers: 1, ..c.evaluator };
        c.output_dir = PathBuf::from("runs/smoke");
        c
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let c: Self = serde_json::from_str(&text)?;
        c.check()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (v, l) in self.vae.iter().zip([Level::Motion, Level::Action, Level::Specific]) {
            if v.level != l {
                return bad(format!("VAE slot for {} holds a {} config", l.as_str(), v.level.as_str()));
            }
            v.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if !(self.vae[0].tokens <= self.vae[1].tokens && self.vae[1].tokens <= self.vae[2].tokens) {
            return bad("latent token counts must not decrease from motion to specific".into());
        }
        if self.dataset.size == 0 || !(0.0..1.0).contains(&self.dataset.test_fraction) {
            return bad("dataset needs samples and a test fraction in [0, 1)".into());
        }
        let d = self.diffusion();
        let schedule = crate::diffusion::schedule_linear(d.schedule_steps, d.beta_start, d.beta_end)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sampler.check(&schedule).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad(format!("condition dropout {} outside [0, 1]", self.cond_dropout));
        }
        let p = &self.protocol;
        if p.repeats == 0 || p.r_precision_batch < 2 || p.frames_per_action == 0 {
            return bad(format!("unusable evaluation protocol {p:?}"));
        }
        Ok(())
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        let shape = |v: &VaeConfig| LatentShape { tokens: v.tokens, dim: v.latent_dim };
        DiffusionConfig {
            denoiser: self.denoiser,
            gat: self.gat,
            latents: [shape(&self.vae[0]), shape(&self.vae[1]), shape(&self.vae[2])],
            schedule_steps: self.schedule_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            cond_dropout: self.cond_dropout,
        }
    }

    /// Seed for one stage, derived from the experiment seed.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage)
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}
