//! Experiment orchestration: dataset, VAE, denoiser and evaluator training,
//! generation, refinement and scoring. Every stage writes its artifacts under
//! `output_dir/<stage>/` together with a `manifest.json` listing digests and
//! seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::checkpoint::{
    config_hash, denoiser_checkpoint, evaluator_checkpoint, file_digest, load_checkpoint, restore_denoiser,
    restore_evaluator, restore_vae, save_checkpoint, vae_checkpoint, CheckpointError,
};
use crate::config::{ConfigError, ExperimentConfig};
use crate::diffusion::{
    prepare_graph, sample_hierarchical, train_diffusion, DiffusionError, DiffusionTrainReport, GraphInput,
    HierarchicalDenoiser, HierarchicalSample, SamplerConfig, VaeSet,
};
use crate::embed::{EncoderRegistry, TextEncoder};
use crate::metrics::{
    diversity, fid, mm_dist, mmodality, r_precision, train_evaluator, Evaluator, EvaluatorReport, FeatureSet, Interval,
    MetricError, MetricReport,
};
use crate::motionrep::{
    lateral_displacement, make_dataset, save_motion, Dataset, MotionError, MotionSequence, Sample, Split,
};
use crate::motionvae::{train_vae, TrainReport, VaeError};
use crate::semgraph::{apply_edit, parse_description, EditError, EditOp, Level, NodeId, ParseError, SemanticGraph};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const LEVELS: [Level; 3] = [Level::Motion, Level::Action, Level::Specific];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Embed(#[from] crate::embed::EmbedError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Record written next to every stage's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub schema: u32,
    pub stage: String,
    pub code_version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Path relative to the stage directory, mapped to its sha256.
    pub artifacts: BTreeMap<String, String>,
    pub summary: Value,
}

impl StageManifest {
    fn new(stage: &str, config: &ExperimentConfig) -> Self {
        StageManifest {
            schema: MANIFEST_SCHEMA,
            stage: stage.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: experiment_hash(config),
            seeds: BTreeMap::from([("experiment".to_string(), config.seed)]),
            artifacts: BTreeMap::new(),
            summary: Value::Null,
        }
    }

    fn add(&mut self, dir: &Path, rel: &str) -> Result<()> {
        self.artifacts.insert(rel.into(), file_digest(&dir.join(rel))?);
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_file(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|_| PipelineError::MissingArtifact(path.clone()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn experiment_hash(config: &ExperimentConfig) -> String {
    config_hash(&serde_json::to_value(config).expect("config serializes"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn stage_dir(config: &ExperimentConfig, stage: &str) -> Result<PathBuf> {
    let d = config.output_dir.join(stage);
    std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    Ok(d)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact(path))
    }
}

/// Stage seeds, fixed offsets into the experiment seed.
pub mod seeds {
    pub const DATASET: u64 = 1;
    pub const VAE: u64 = 2;
    pub const DENOISER: u64 = 3;
    pub const EVALUATOR: u64 = 4;
    pub const EVALUATE: u64 = 5;
}

/// Builds the toy corpus of `config`, with the dataset seed derived from the
/// experiment seed.
pub fn build_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let mut dc = config.dataset.clone();
    dc.seed = config.stage_seed(seeds::DATASET);
    Ok(make_dataset(&dc)?)
}

/// Loads the corpus and checks it against the recorded dataset manifest.
fn recorded_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let path = require(config.output_dir.join("dataset").join("dataset.json"))?;
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let recorded: crate::motionrep::Manifest = serde_json::from_str(&text)?;
    let ds = build_dataset(config)?;
    if ds.manifest().hash != recorded.hash {
        return Err(PipelineError::Mismatch(format!("{} does not match the configured dataset", path.display())));
    }
    Ok(ds)
}

pub fn train_motions(ds: &Dataset) -> Vec<&MotionSequence> {
    ds.split(Split::Train).map(|s| &s.motion).collect()
}

pub fn text_encoder(config: &ExperimentConfig) -> Result<Arc<dyn TextEncoder>> {
    Ok(EncoderRegistry::with_defaults(config.gat.dim).get(&config.encoder)?)
}

/// Trains the three VAEs with equal budgets.
pub fn fit_vaes(config: &ExperimentConfig, ds: &Dataset) -> Result<(VaeSet, Vec<TrainReport>)> {
    let motions = train_motions(ds);
    let mut set = VaeSet::default();
    let mut reports = Vec::new();
    for (i, vc) in config.vae.iter().enumerate() {
        let mut tc = config.vae_train;
        tc.seed = config.stage_seed(seeds::VAE).wrapping_add(i as u64);
        let (vae, report) = train_vae(&motions, ds.normalizer(), *vc, tc)?;
        set.insert(vae);
        reports.push(report);
    }
    Ok((set, reports))
}

pub fn graph_inputs(enc: &dyn TextEncoder, samples: &[&Sample]) -> Result<Vec<GraphInput>> {
    samples.iter().map(|s| Ok(prepare_graph(enc, &s.graph)?)).collect()
}

pub fn fit_denoiser(
    config: &ExperimentConfig,
    ds: &Dataset,
    vaes: &VaeSet,
) -> Result<(HierarchicalDenoiser, DiffusionTrainReport)> {
    let enc = text_encoder(config)?;
    let train: Vec<&Sample> = ds.split(Split::Train).collect();
    let inputs = graph_inputs(enc.as_ref(), &train)?;
    let motions: Vec<&MotionSequence> = train.iter().map(|s| &s.motion).collect();
    let mut tc = config.diffusion_train;
    tc.seed = config.stage_seed(seeds::DENOISER);
    Ok(train_diffusion(&inputs, &motions, vaes, config.diffusion(), tc)?)
}

pub fn fit_evaluator(config: &ExperimentConfig, ds: &Dataset) -> Result<(Evaluator, EvaluatorReport)> {
    let train: Vec<&Sample> = ds.split(Split::Train).collect();
    let motions: Vec<&MotionSequence> = train.iter().map(|s| &s.motion).collect();
    let texts: Vec<&str> = train.iter().map(|s| s.text.as_str()).collect();
    let mut ec = config.evaluator;
    ec.seed = config.stage_seed(seeds::EVALUATOR);
    Ok(train_evaluator(&motions, &texts, ds.normalizer(), ec)?)
}

/// Default generation length for a graph.
pub fn default_frames(config: &ExperimentConfig, g: &SemanticGraph) -> usize {
    config.protocol.frames_per_action * g.count(Level::Action).max(1)
}

/// Trained generator: frozen VAEs, denoiser and text encoder.
pub struct Models {
    pub config: ExperimentConfig,
    pub vaes: VaeSet,
    pub denoiser: HierarchicalDenoiser,
    pub encoder: Arc<dyn TextEncoder>,
    /// Checkpoint file name mapped to its sha256.
    pub hashes: BTreeMap<String, String>,
}

impl Models {
    pub fn new(config: ExperimentConfig, vaes: VaeSet, denoiser: HierarchicalDenoiser) -> Result<Self> {
        let encoder = text_encoder(&config)?;
        Ok(Models { config, vaes, denoiser, encoder, hashes: BTreeMap::new() })
    }

    /// Loads the checkpoints written by `train-vae` and `train-diffusion`
    /// from `dir` (defaults to the configured output directory).
    pub fn load(config: ExperimentConfig, dir: Option<&Path>) -> Result<Self> {
        let root = dir.map_or_else(|| config.output_dir.clone(), Path::to_path_buf);
        let mut hashes = BTreeMap::new();
        let mut vaes = VaeSet::default();
        for l in LEVELS {
            let path = require(root.join("vae").join(format!("{}.ckpt", l.as_str())))?;
            let vae = restore_vae(&load_checkpoint(&path)?)?;
            if vae.config.level != l {
                return Err(PipelineError::Mismatch(format!("{} holds a {} VAE", path.display(), vae.config.level.as_str())));
            }
            hashes.insert(format!("vae/{}.ckpt", l.as_str()), file_digest(&path)?);
            vaes.insert(vae);
        }
        let path = require(root.join("diffusion").join("denoiser.ckpt"))?;
        let denoiser = restore_denoiser(&load_checkpoint(&path)?)?;
        hashes.insert("diffusion/denoiser.ckpt".into(), file_digest(&path)?);
        for (s, l) in LEVELS.iter().enumerate() {
            let v = vaes.get(*l)?;
            let shape = denoiser.config.latents[s];
            if (v.config.tokens, v.config.latent_dim) != (shape.tokens, shape.dim) {
                return Err(PipelineError::Mismatch(format!("{} VAE latent shape does not match the denoiser", l.as_str())));
            }
        }
        let mut m = Models::new(config, vaes, denoiser)?;
        m.hashes = hashes;
        Ok(m)
    }

    pub fn prepare(&self, g: &SemanticGraph) -> Result<GraphInput> {
        Ok(prepare_graph(self.encoder.as_ref(), g)?)
    }

    /// Generates one motion per graph; `frames` defaults per graph.
    pub fn generate(
        &self,
        graphs: &[SemanticGraph],
        frames: Option<&[usize]>,
        sampler: &SamplerConfig,
    ) -> Result<Vec<HierarchicalSample>> {
        let inputs: Vec<GraphInput> = graphs.iter().map(|g| self.prepare(g)).collect::<Result<_>>()?;
        let frames: Vec<usize> = match frames {
            Some(f) => f.to_vec(),
            None => graphs.iter().map(|g| default_frames(&self.config, g)).collect(),
        };
        let refs: Vec<&GraphInput> = inputs.iter().collect();
        Ok(sample_hierarchical(Some(&self.denoiser), &self.vaes, &refs, &frames, sampler)?)
    }

    /// Generates in chunks so memory stays bounded on large prompt sets.
    pub fn generate_chunked(
        &self,
        graphs: &[SemanticGraph],
        frames: &[usize],
        sampler: &SamplerConfig,
        chunk: usize,
    ) -> Result<Vec<HierarchicalSample>> {
        // streams are per prompt index, so each chunk offsets its seed
        let mut out = Vec::with_capacity(graphs.len());
        for (k, (g, f)) in graphs.chunks(chunk.max(1)).zip(frames.chunks(chunk.max(1))).enumerate() {
            let s = SamplerConfig { seed: sampler.seed.wrapping_add((k as u64) << 32), ..*sampler };
            out.extend(self.generate(g, Some(f), &s)?);
        }
        Ok(out)
    }
}

/// Parses `text` or validates a supplied graph.
pub fn resolve_graph(text: Option<&str>, graph: Option<SemanticGraph>) -> Result<SemanticGraph> {
    match (text, graph) {
        (_, Some(g)) => {
            let v = crate::semgraph::validate(&g);
            if v.is_empty() {
                Ok(g)
            } else {
                Err(EditError::InvalidGraph(v).into())
            }
        }
        (Some(t), None) => Ok(parse_description(t)?),
        (None, None) => Err(PipelineError::Invalid("either text or graph is required".into())),
    }
}

/// Resolves a node reference by id, then by exact node text.
pub fn find_node(g: &SemanticGraph, key: &str, under: Option<&NodeId>) -> Result<NodeId> {
    if let Some(n) = g.nodes.iter().find(|n| n.id.as_str() == key) {
        return Ok(n.id.clone());
    }
    let hits: Vec<&NodeId> = g
        .nodes
        .iter()
        .filter(|n| n.text == key)
        .filter(|n| under.is_none_or(|p| g.edge(p, &n.id).is_some()))
        .map(|n| &n.id)
        .collect();
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(PipelineError::Invalid(format!("no node matches {key:?}"))),
        _ => Err(PipelineError::Invalid(format!("{key:?} matches several nodes; use a node id"))),
    }
}

/// Parses the compact edit syntax used on the command line:
/// `edge:SRC→DST weight=W` (`->` also accepted), `mask:NODE`, `delete:NODE`,
/// `modify:NODE text=NEW`. Nodes are ids or exact node texts.
pub fn parse_edit(g: &SemanticGraph, spec: &str) -> Result<EditOp> {
    let bad = || PipelineError::Invalid(format!("cannot parse edit {spec:?}"));
    let (kind, rest) = spec.split_once(':').ok_or_else(bad)?;
    let (target, arg) = match rest.find(" weight=").or_else(|| rest.find(" text=")) {
        Some(i) => (rest[..i].trim(), Some(rest[i + 1..].trim())),
        None => (rest.trim(), None),
    };
    let value = |key: &str| arg.and_then(|a| a.strip_prefix(key)).map(str::trim).ok_or_else(bad);
    match kind.trim() {
        "edge" => {
            let (src, dst) = target.split_once('→').or_else(|| target.split_once("->")).ok_or_else(bad)?;
            let src = find_node(g, src.trim(), None)?;
            let dst = find_node(g, dst.trim(), Some(&src))?;
            let weight: f64 = value("weight=")?.parse().map_err(|_| bad())?;
            Ok(EditOp::SetEdgeWeight { src, dst, weight })
        }
        "mask" => Ok(EditOp::MaskNode { node: find_node(g, target, None)? }),
        "delete" => Ok(EditOp::DeleteNode { node: find_node(g, target, None)? }),
        "modify" => {
            Ok(EditOp::ModifyNode { node: find_node(g, target, None)?, text: value("text=")?.to_string() })
        }
        _ => Err(bad()),
    }
}

pub fn apply_edits(g: &SemanticGraph, edits: &[EditOp]) -> Result<SemanticGraph> {
    let mut g = g.clone();
    for e in edits {
        g = apply_edit(&g, e)?;
    }
    Ok(g)
}

/// How a refinement changed the generated motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionDiff {
    pub lateral_before: f64,
    pub lateral_after: f64,
    /// Mean absolute per-feature difference over the common frames.
    pub mean_abs_change: f64,
}

pub fn motion_diff(before: &MotionSequence, after: &MotionSequence) -> MotionDiff {
    let n = before.len().min(after.len()) * before.width();
    let change = before.as_slice()[..n].iter().zip(&after.as_slice()[..n]).map(|(a, b)| (a - b).abs()).sum::<f64>()
        / n.max(1) as f64;
    MotionDiff {
        lateral_before: lateral_displacement(before),
        lateral_after: lateral_displacement(after),
        mean_abs_change: change,
    }
}

/// Writes a generation (final motion, per-level decodes, graph) to `dir`.
pub fn write_generation(dir: &Path, g: &SemanticGraph, s: &HierarchicalSample) -> Result<BTreeMap<String, String>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = [
        ("motion.bin", &s.motion),
        ("motion_level.bin", &s.decoded_motion_level),
        ("action_level.bin", &s.decoded_action_level),
    ];
    let mut out = BTreeMap::new();
    for (name, m) in files {
        let p = dir.join(name);
        save_motion(&p, m)?;
        out.insert(name.to_string(), file_digest(&p)?);
    }
    let p = dir.join("graph.json");
    write_file(&p, crate::semgraph::to_json(g).as_bytes())?;
    out.insert("graph.json".into(), file_digest(&p)?);
    Ok(out)
}

// ---- stages ----

pub fn stage_make_dataset(config: &ExperimentConfig) -> Result<StageManifest> {
    config.check()?;
    let ds = build_dataset(config)?;
    let dir = stage_dir(config, "dataset")?;
    let manifest = ds.manifest();
    write_file(&dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    let motions = dir.join("motions");
    std::fs::create_dir_all(&motions).map_err(io_err(&motions))?;
    for s in &ds.samples {
        save_motion(motions.join(format!("{:05}.bin", s.id)), &s.motion)?;
    }
    let mut sm = StageManifest::new("make-dataset", config);
    sm.seeds.insert("dataset".into(), config.stage_seed(seeds::DATASET));
    sm.add(&dir, "dataset.json")?;
    sm.summary = serde_json::json!({
        "samples": ds.samples.len(),
        "train": ds.split(Split::Train).count(),
        "test": ds.split(Split::Test).count(),
        "dataset_hash": manifest.hash,
    });
    sm.write(&dir)?;
    Ok(sm)
}

pub fn stage_train_vae(config: &ExperimentConfig) -> Result<StageManifest> {
    config.check()?;
    let ds = recorded_dataset(config)?;
    let (vaes, reports) = fit_vaes(config, &ds)?;
    let dir = stage_dir(config, "vae")?;
    let mut sm = StageManifest::new("train-vae", config);
    let test: Vec<&MotionSequence> = ds.split(Split::Test).map(|s| &s.motion).collect();
    let mut summary = serde_json::Map::new();
    for (l, r) in LEVELS.iter().zip(&reports) {
        let vae = vaes.get(*l)?;
        let name = format!("{}.ckpt", l.as_str());
        save_checkpoint(&dir.join(&name), &vae_checkpoint(vae, Some(r.rng.clone()))?)?;
        sm.add(&dir, &name)?;
        sm.seeds.insert(format!("vae.{}", l.as_str()), r.seed);
        let test_mse = if test.is_empty() { f64::NAN } else { vae.reconstruction_mse(&test)? };
        summary.insert(l.as_str().into(), serde_json::json!({ "first": r.first, "last": r.last, "test_mse": test_mse }));
    }
    sm.summary = Value::Object(summary);
    sm.write(&dir)?;
    Ok(sm)
}

fn load_vaes(config: &ExperimentConfig) -> Result<VaeSet> {
    let mut set = VaeSet::default();
    for l in LEVELS {
        let p = require(config.output_dir.join("vae").join(format!("{}.ckpt", l.as_str())))?;
        set.insert(restore_vae(&load_checkpoint(&p)?)?);
    }
    Ok(set)
}

pub fn stage_train_diffusion(config: &ExperimentConfig) -> Result<StageManifest> {
    config.check()?;
    let ds = recorded_dataset(config)?;
    let vaes = load_vaes(config)?;
    for (l, vc) in LEVELS.iter().zip(&config.vae) {
        if vaes.get(*l)?.config != *vc {
            return Err(PipelineError::Mismatch(format!("{} VAE checkpoint was trained with another config", l.as_str())));
        }
    }
    let (model, report) = fit_denoiser(config, &ds, &vaes)?;
    let dir = stage_dir(config, "diffusion")?;
    save_checkpoint(&dir.join("denoiser.ckpt"), &denoiser_checkpoint(&model, Some(report.rng.clone()))?)?;
    let mut sm = StageManifest::new("train-diffusion", config);
    sm.add(&dir, "denoiser.ckpt")?;
    sm.seeds.insert("denoiser".into(), report.seed);
    sm.summary = serde_json::json!({
        "first_last_epoch": report.first_last_epoch(),
        "latent_scale": model.latent_scale,
    });
    sm.write(&dir)?;
    Ok(sm)
}

pub fn stage_train_evaluator(config: &ExperimentConfig) -> Result<StageManifest> {
    config.check()?;
    let ds = recorded_dataset(config)?;
    let (ev, report) = fit_evaluator(config, &ds)?;
    let dir = stage_dir(config, "evaluator")?;
    save_checkpoint(&dir.join("evaluator.ckpt"), &evaluator_checkpoint(&ev, Some(report.rng.clone()))?)?;
    let mut sm = StageManifest::new("train-evaluator", config);
    sm.add(&dir, "evaluator.ckpt")?;
    sm.seeds.insert("evaluator".into(), config.stage_seed(seeds::EVALUATOR));
    sm.summary = serde_json::json!({ "curve": report.curve });
    sm.write(&dir)?;
    Ok(sm)
}

/// Generates one prompt (text or graph file) and writes the result under
/// `generate/<name>/`.
pub fn stage_generate(
    config: &ExperimentConfig,
    models: &Models,
    graph: SemanticGraph,
    name: &str,
    frames: Option<usize>,
    sampler: &SamplerConfig,
) -> Result<StageManifest> {
    let frames = frames.unwrap_or_else(|| default_frames(config, &graph));
    let s = models.generate(std::slice::from_ref(&graph), Some(&[frames]), sampler)?.remove(0);
    let dir = stage_dir(config, "generate")?.join(name);
    let mut sm = StageManifest::new("generate", config);
    sm.artifacts = write_generation(&dir, &graph, &s)?;
    sm.seeds.insert("sampler".into(), sampler.seed);
    sm.summary = serde_json::json!({
        "frames": frames,
        "sampler": sampler,
        "lateral_displacement": lateral_displacement(&s.motion),
        "checkpoints": models.hashes,
    });
    sm.write(&dir)?;
    Ok(sm)
}

/// Generates before and after applying `edits`, at the same seed.
pub struct Refinement {
    pub graph: SemanticGraph,
    pub before: HierarchicalSample,
    pub after: HierarchicalSample,
    pub diff: MotionDiff,
}

pub fn refine(
    models: &Models,
    graph: &SemanticGraph,
    edits: &[EditOp],
    frames: Option<usize>,
    sampler: &SamplerConfig,
) -> Result<Refinement> {
    let edited = apply_edits(graph, edits)?;
    // the length follows the original graph so the comparison is frame-aligned
    let frames = frames.unwrap_or_else(|| default_frames(&models.config, graph));
    let before = models.generate(std::slice::from_ref(graph), Some(&[frames]), sampler)?.remove(0);
    let after = models.generate(std::slice::from_ref(&edited), Some(&[frames]), sampler)?.remove(0);
    let diff = motion_diff(&before.motion, &after.motion);
    Ok(Refinement { graph: edited, before, after, diff })
}

pub fn stage_refine(
    config: &ExperimentConfig,
    models: &Models,
    graph: &SemanticGraph,
    edits: &[EditOp],
    name: &str,
    frames: Option<usize>,
    sampler: &SamplerConfig,
) -> Result<(StageManifest, MotionDiff)> {
    let r = refine(models, graph, edits, frames, sampler)?;
    let dir = stage_dir(config, "refine")?.join(name);
    let mut sm = StageManifest::new("refine", config);
    for (k, v) in write_generation(&dir.join("before"), graph, &r.before)? {
        sm.artifacts.insert(format!("before/{k}"), v);
    }
    for (k, v) in write_generation(&dir.join("after"), &r.graph, &r.after)? {
        sm.artifacts.insert(format!("after/{k}"), v);
    }
    sm.seeds.insert("sampler".into(), sampler.seed);
    sm.summary = serde_json::json!({ "edits": edits, "diff": r.diff });
    sm.write(&dir)?;
    Ok((sm, r.diff))
}

/// Which decode of a hierarchical sample to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decode {
    MotionLevel,
    ActionLevel,
    Final,
}

impl Decode {
    pub fn pick(self, s: &HierarchicalSample) -> &MotionSequence {
        match self {
            Decode::MotionLevel => &s.decoded_motion_level,
            Decode::ActionLevel => &s.decoded_action_level,
            Decode::Final => &s.motion,
        }
    }
}

/// Scores generations of the test prompts against the test motions. Each
/// repeat regenerates with its own sampler seed. Prompts keep their real
/// lengths.
pub fn evaluate_models(
    config: &ExperimentConfig,
    models: &Models,
    evaluator: &Evaluator,
    test: &[&Sample],
    sampler: &SamplerConfig,
) -> Result<MetricReport> {
    let p = config.protocol;
    let graphs: Vec<SemanticGraph> = test.iter().map(|s| s.graph.clone()).collect();
    let frames: Vec<usize> = test.iter().map(|s| s.motion.len()).collect();
    let real: Vec<&MotionSequence> = test.iter().map(|s| &s.motion).collect();
    let real_f = evaluator.motion_features(&real)?;
    let texts: Vec<&str> = test.iter().map(|s| s.text.as_str()).collect();
    let text_f = evaluator.text_features(&texts)?;
    let batch = p.r_precision_batch.min(test.len());
    let subset = p.diversity_subset.min(test.len() / 2);
    let base = config.stage_seed(seeds::EVALUATE);
    let (mut top, mut fids, mut mms, mut divs) = ([vec![], vec![], vec![]], vec![], vec![], vec![]);
    for r in 0..p.repeats {
        let s = SamplerConfig { seed: sampler.seed.wrapping_add(r as u64), ..*sampler };
        let gen = models.generate_chunked(&graphs, &frames, &s, 128)?;
        let motions: Vec<&MotionSequence> = gen.iter().map(|g| &g.motion).collect();
        let gen_f = evaluator.motion_features(&motions)?;
        let rp = r_precision(&gen_f, &text_f, batch, 1, base.wrapping_add(r as u64))?;
        for k in 0..3 {
            top[k].push(rp.top[k]);
        }
        fids.push(fid(&real_f, &gen_f)?);
        mms.push(mm_dist(&text_f, &gen_f)?);
        divs.push(diversity(&gen_f, subset, base.wrapping_add(r as u64))?);
        log::info!("evaluate repeat {} top1 {:.3} fid {:.4}", r + 1, rp.top[0], fids[r]);
    }
    let mmodality = if p.mmodality_texts > 0 && p.mmodality_pairs > 0 {
        Some(mmodality_interval(models, evaluator, &graphs, &frames, sampler, p.mmodality_texts, p.mmodality_pairs)?)
    } else {
        None
    };
    Ok(MetricReport {
        r_precision: [Interval::from_samples(&top[0]), Interval::from_samples(&top[1]), Interval::from_samples(&top[2])],
        fid: Interval::from_samples(&fids),
        mm_dist: Interval::from_samples(&mms),
        diversity: Interval::from_samples(&divs),
        mmodality,
        repeats: p.repeats,
    })
}

fn mmodality_interval(
    models: &Models,
    evaluator: &Evaluator,
    graphs: &[SemanticGraph],
    frames: &[usize],
    sampler: &SamplerConfig,
    texts: usize,
    pairs: usize,
) -> Result<Interval> {
    let n = texts.min(graphs.len());
    // one batched generation per draw index, shared by all texts
    let mut draws: Vec<FeatureSet> = Vec::with_capacity(2 * pairs);
    for d in 0..2 * pairs {
        let s = SamplerConfig { seed: sampler.seed.wrapping_add(0x6d6d_0000 + d as u64), ..*sampler };
        let gen = models.generate(&graphs[..n], Some(&frames[..n]), &s)?;
        let ms: Vec<&MotionSequence> = gen.iter().map(|g| &g.motion).collect();
        draws.push(evaluator.motion_features(&ms)?);
    }
    let per_text: Vec<f64> = (0..n)
        .map(|t| {
            mmodality::<std::convert::Infallible>(1, pairs, |_, d| Ok(draws[d].row(t))).unwrap_or_else(|e| match e {})
        })
        .collect();
    Ok(Interval::from_samples(&per_text))
}

pub fn stage_evaluate(config: &ExperimentConfig, models: &Models, sampler: &SamplerConfig) -> Result<(StageManifest, MetricReport)> {
    let ds = recorded_dataset(config)?;
    let ev_path = config.output_dir.join("evaluator").join("evaluator.ckpt");
    let evaluator = if ev_path.exists() {
        restore_evaluator(&load_checkpoint(&ev_path)?)?
    } else {
        stage_train_evaluator(config)?;
        restore_evaluator(&load_checkpoint(&ev_path)?)?
    };
    let test: Vec<&Sample> = ds.split(Split::Test).collect();
    let report = evaluate_models(config, models, &evaluator, &test, sampler)?;
    let dir = stage_dir(config, "evaluate")?;
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut sm = StageManifest::new("evaluate", config);
    sm.add(&dir, "report.json")?;
    sm.seeds.insert("sampler".into(), sampler.seed);
    sm.seeds.insert("evaluate".into(), config.stage_seed(seeds::EVALUATE));
    let mut ck = models.hashes.clone();
    ck.insert("evaluator/evaluator.ckpt".into(), file_digest(&ev_path)?);
    sm.summary = serde_json::json!({ "checkpoints": ck });
    sm.write(&dir)?;
    Ok((sm, report))
}

/// Runs every training stage in order and loads the resulting models.
pub fn run_training(config: &ExperimentConfig) -> Result<Models> {
    stage_make_dataset(config)?;
    stage_train_vae(config)?;
    stage_train_diffusion(config)?;
    stage_train_evaluator(config)?;
    Models::load(config.clone(), None)
}

/// Restores the evaluator written by `train-evaluator`.
pub fn load_evaluator(config: &ExperimentConfig) -> Result<Evaluator> {
    let p = require(config.output_dir.join("evaluator").join("evaluator.ckpt"))?;
    Ok(restore_evaluator(&load_checkpoint(&p)?)?)
}
