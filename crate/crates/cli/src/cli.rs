//! Subcommands. Each writes its artifacts and a manifest under the output
//! directory and prints a JSON summary on stdout.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use strata::config::ExperimentConfig;
use strata::diffusion::SamplerConfig;
use strata::pipeline::{self, Models, PipelineError};
use strata::semgraph::{from_json, parse_description, SemanticGraph};

pub const CHECKPOINT_ENV: &str = "STRATA_CHECKPOINT_DIR";

#[derive(Debug, Parser)]
#[command(name = "strata", version, about = "Graph-conditioned coarse-to-fine motion diffusion")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Single-CPU defaults.
    Desk,
    /// Seconds-long run that exercises every stage.
    Smoke,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config JSON; overrides the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Experiment seed; overrides the config.
    #[arg(long = "experiment-seed", global = true)]
    pub experiment_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    /// Sampler seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// DDIM steps for the motion, action and specific levels, e.g. 15,15,20.
    #[arg(long, value_parser = parse_steps)]
    pub steps: Option<[usize; 3]>,
    /// Guidance scale.
    #[arg(long)]
    pub guidance: Option<f64>,
    /// DDIM stochasticity in [0, 1]; 0 is deterministic
    #[arg(long)]
    pub eta: Option<f64>,
}

fn parse_steps(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected three comma-separated counts, got {}", v.len()))
}

impl SamplerArgs {
    fn sampler(&self, base: &SamplerConfig) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps.unwrap_or(base.steps),
            guidance: self.guidance.unwrap_or(base.guidance),
            eta: self.eta.unwrap_or(base.eta),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the toy corpus and its manifest.
    MakeDataset,
    /// Train the motion, action and specific VAEs.
    TrainVae,
    /// Train the hierarchical denoiser on frozen VAEs.
    TrainDiffusion,
    /// Train the contrastive evaluator used for scoring.
    TrainEvaluator,
    /// Generate a motion from text or a graph file.
    Generate {
        /// Motion description to parse
        #[arg(long, conflicts_with = "graph", required_unless_present = "graph")]
        text: Option<String>,
        /// Graph JSON file, e.g. a graph.json written by an earlier run
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Frames to generate; defaults to a fixed length per action.
        #[arg(long)]
        frames: Option<usize>,
        /// Name of the result directory under generate/.
        #[arg(long, default_value = "sample")]
        name: String,
        /// Directory holding vae/ and diffusion/ checkpoints.
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Score generations of the test prompts; writes a MetricReport.
    Evaluate {
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Apply edits to a graph and regenerate at the same seed.
    Refine {
        /// Graph JSON file to edit
        #[arg(long)]
        graph: PathBuf,
        /// Edit such as "edge:walks→forward weight=2.0", "mask:NODE",
        /// "delete:NODE" or "modify:NODE text=NEW"; repeatable.
        #[arg(long = "edit", required = true)]
        edits: Vec<String>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value = "refined")]
        name: String,
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Serve /parse, /generate, /refine and /health over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
    },
}

/// Machine-readable failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
    pub code: i32,
}

impl Failure {
    pub fn to_json(&self) -> Value {
        json!({ "error": { "kind": self.kind, "message": self.message } })
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let (kind, code) = match &e {
            PipelineError::Config(_) => ("config", 2),
            PipelineError::MissingArtifact(_) => ("missing_artifact", 3),
            PipelineError::Mismatch(_) => ("mismatch", 4),
            PipelineError::Parse(_) | PipelineError::Edit(_) | PipelineError::Invalid(_) => ("invalid_input", 5),
            _ => ("internal", 1),
        };
        Failure { kind, message: e.to_string(), code }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure { kind: "internal", message: format!("{e:#}"), code: 1 }
    }
}

pub fn load_config(common: &Common) -> Result<ExperimentConfig, PipelineError> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => match common.preset {
            Preset::Desk => ExperimentConfig::desk(),
            Preset::Smoke => ExperimentConfig::smoke(),
        },
    };
    if let Some(o) = &common.out {
        c.output_dir = o.clone();
    }
    if let Some(s) = common.experiment_seed {
        c.seed = s;
    }
    c.check()?;
    Ok(c)
}

fn read_graph(path: &Path) -> Result<SemanticGraph, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|_| PipelineError::MissingArtifact(path.into()))?;
    from_json(&text).map_err(|e| PipelineError::Invalid(e.to_string()))
}

fn models(config: &ExperimentConfig, dir: Option<&Path>) -> Result<Models, PipelineError> {
    Models::load(config.clone(), dir)
}

/// Runs one subcommand and returns its JSON summary.
pub fn run(cli: Cli) -> Result<Value, Failure> {
    let config = load_config(&cli.common)?;
    let manifest = |m: pipeline::StageManifest| serde_json::to_value(m).expect("manifest serializes");
    Ok(match cli.command {
        Command::MakeDataset => manifest(pipeline::stage_make_dataset(&config)?),
        Command::TrainVae => manifest(pipeline::stage_train_vae(&config)?),
        Command::TrainDiffusion => manifest(pipeline::stage_train_diffusion(&config)?),
        Command::TrainEvaluator => manifest(pipeline::stage_train_evaluator(&config)?),
        Command::Generate { text, graph, frames, name, checkpoint, sampler } => {
            let g = match (text, graph) {
                (Some(t), _) => parse_description(&t).map_err(PipelineError::from)?,
                (None, Some(p)) => read_graph(&p)?,
                (None, None) => return Err(PipelineError::Invalid("--text or --graph is required".into()).into()),
            };
            let m = models(&config, checkpoint.as_deref())?;
            let s = sampler.sampler(&config.sampler);
            manifest(pipeline::stage_generate(&config, &m, g, &name, frames, &s)?)
        }
        Command::Evaluate { checkpoint, sampler } => {
            let m = models(&config, checkpoint.as_deref())?;
            let (sm, report) = pipeline::stage_evaluate(&config, &m, &sampler.sampler(&config.sampler))?;
            eprintln!("{}", report.table());
            json!({ "manifest": sm, "report": report })
        }
        Command::Refine { graph, edits, frames, name, checkpoint, sampler } => {
            let g = read_graph(&graph)?;
            let mut ops = Vec::new();
            let mut current = g.clone();
            for e in &edits {
                let op = pipeline::parse_edit(&current, e)?;
                current = pipeline::apply_edits(&current, std::slice::from_ref(&op))?;
                ops.push(op);
            }
            let m = models(&config, checkpoint.as_deref())?;
            let s = sampler.sampler(&config.sampler);
            let (sm, diff) = pipeline::stage_refine(&config, &m, &g, &ops, &name, frames, &s)?;
            json!({ "manifest": sm, "diff": diff })
        }
        Command::Serve { addr, checkpoint } => {
            let m = Arc::new(models(&config, checkpoint.as_deref())?);
            let rt = tokio::runtime::Runtime::new().map_err(anyhow::Error::from)?;
            rt.block_on(crate::server::serve(m, &addr))?;
            json!({ "status": "stopped" })
        }
    })
}
