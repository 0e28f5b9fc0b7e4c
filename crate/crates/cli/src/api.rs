//! JSON schemas of the HTTP service.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use strata::diffusion::{HierarchicalSample, SamplerConfig};
use strata::motionrep::{lateral_displacement, root_trajectory, MotionSequence};
use strata::semgraph::{EditOp, SemanticGraph};

pub const API_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseRequest {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParseResponse {
    pub schema_version: u32,
    pub graph: SemanticGraph,
}

/// Per-request changes to the configured sampler.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerOverrides {
    pub steps: Option<[usize; 3]>,
    pub guidance: Option<f64>,
    pub eta: Option<f64>,
}

impl SamplerOverrides {
    pub fn apply(&self, base: &SamplerConfig, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps.unwrap_or(base.steps),
            guidance: self.guidance.unwrap_or(base.guidance),
            eta: self.eta.unwrap_or(base.eta),
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub text: Option<String>,
    pub graph: Option<SemanticGraph>,
    #[serde(default)]
    pub sampler: SamplerOverrides,
    #[serde(default)]
    pub seed: u64,
    pub frames: Option<usize>,
    /// Checkpoint digests the caller expects the service to hold.
    pub checkpoints: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineRequest {
    pub graph: SemanticGraph,
    #[serde(default)]
    pub edits: Vec<EditOp>,
    #[serde(default)]
    pub sampler: SamplerOverrides,
    #[serde(default)]
    pub seed: u64,
    pub frames: Option<usize>,
    pub checkpoints: Option<BTreeMap<String, String>>,
}

/// Motion inlined for the studio: feature rows plus the integrated root path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionPayload {
    pub fps: f64,
    pub joints: usize,
    pub frames: Vec<Vec<f64>>,
    /// World `(x, z)` per frame boundary.
    pub trajectory: Vec<[f64; 2]>,
    pub lateral_displacement: f64,
}

impl From<&MotionSequence> for MotionPayload {
    fn from(m: &MotionSequence) -> Self {
        MotionPayload {
            fps: m.fps,
            joints: m.layout.joints,
            frames: m.to_rows(),
            trajectory: root_trajectory(m).into_iter().map(|(x, z)| [x, z]).collect(),
            lateral_displacement: lateral_displacement(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPayloads {
    pub motion: MotionPayload,
    pub action: MotionPayload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub schema_version: u32,
    /// The exact graph the motion was generated from.
    pub graph: SemanticGraph,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub motion: MotionPayload,
    pub levels: LevelPayloads,
    pub latency_ms: f64,
    pub checkpoints: BTreeMap<String, String>,
}

impl GenerationResponse {
    pub fn new(
        graph: SemanticGraph,
        sampler: SamplerConfig,
        s: &HierarchicalSample,
        latency_ms: f64,
        checkpoints: BTreeMap<String, String>,
    ) -> Self {
        GenerationResponse {
            schema_version: API_SCHEMA_VERSION,
            graph,
            seed: sampler.seed,
            sampler,
            motion: (&s.motion).into(),
            levels: LevelPayloads {
                motion: (&s.decoded_motion_level).into(),
                action: (&s.decoded_action_level).into(),
            },
            latency_ms,
            checkpoints,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub schema_version: u32,
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    /// Set on internal errors so the log line can be found.
    pub id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}
