use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{cfg_combine, ddim_loop, q_sample_tensor, schedule_linear, NoiseSchedule};
use super::{DiffusionError, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::embed::{embed_graph, TextEncoder};
use crate::graphreason::{reason_batch, GATLayerParams, GatConfig, GraphBatch};
use crate::motionrep::MotionSequence;
use crate::motionvae::{LatentSeq, MotionBatch, MotionVae};
use crate::nn::{key_padding_bias, mse, scalar_f64, sinusoid_embed, LayerNorm, Linear, Optim, OptimConfig, ParamStore, TransformerLayer};
use crate::semgraph::{Level, SemanticGraph};

const LEVELS: [Level; 3] = [Level::Motion, Level::Action, Level::Specific];

fn level_slot(l: Level) -> usize {
    match l {
        Level::Motion => 0,
        Level::Action => 1,
        Level::Specific => 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    /// Size of the action-ordinal table; later actions share the last row.
    pub max_actions: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { width: 64, layers: 4, heads: 2, ff: 128, max_actions: 8 }
    }
}

/// Latent grid shape `(C, D′)` of one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub tokens: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub denoiser: DenoiserConfig,
    pub gat: GatConfig,
    /// Latent shapes for motion, action, specific.
    pub latents: [LatentShape; 3],
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Probability of replacing the condition set with the null token.
    pub cond_dropout: f64,
}

impl DiffusionConfig {
    pub fn new(latents: [LatentShape; 3]) -> Self {
        DiffusionConfig {
            denoiser: DenoiserConfig::default(),
            gat: GatConfig::default(),
            latents,
            schedule_steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            cond_dropout: 0.1,
        }
    }

    pub fn for_vaes(vaes: &VaeSet) -> Result<Self, DiffusionError> {
        let mut shapes = [LatentShape { tokens: 0, dim: 0 }; 3];
        for l in LEVELS {
            let c = vaes.get(l)?.config;
            shapes[level_slot(l)] = LatentShape { tokens: c.tokens, dim: c.latent_dim };
        }
        Ok(Self::new(shapes))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        schedule_linear(self.schedule_steps, self.beta_start, self.beta_end)
    }

    fn check(&self) -> Result<(), DiffusionError> {
        let d = &self.denoiser;
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(DiffusionError::Config(format!("dropout {} outside [0, 1]", self.cond_dropout)));
        }
        if d.width % d.heads != 0 || d.layers == 0 || d.max_actions == 0 || self.gat.layers == 0 {
            return Err(DiffusionError::Config(format!("unsupported denoiser shape {d:?}")));
        }
        if self.latents.iter().any(|s| s.tokens == 0 || s.dim == 0) {
            return Err(DiffusionError::Config("latent shapes must be nonzero".into()));
        }
        self.schedule().map(|_| ())
    }
}

/// Frozen VAEs for the three levels.
#[derive(Default)]
pub struct VaeSet {
    slots: [Option<MotionVae>; 3],
}

impl VaeSet {
    pub fn new(vaes: impl IntoIterator<Item = MotionVae>) -> Self {
        let mut s = VaeSet::default();
        for v in vaes {
            s.insert(v);
        }
        s
    }

    pub fn insert(&mut self, vae: MotionVae) {
        let i = level_slot(vae.config.level);
        self.slots[i] = Some(vae);
    }

    pub fn get(&self, level: Level) -> Result<&MotionVae, DiffusionError> {
        self.slots[level_slot(level)]
            .as_ref()
            .ok_or_else(|| DiffusionError::MissingCheckpoint(format!("{} VAE", level.as_str())))
    }
}

/// Initial node vectors of one graph in node order, with the data the
/// condition tokens need.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub graph: SemanticGraph,
    /// Row-major `nodes × D`.
    pub rows: Vec<f32>,
    pub dim: usize,
    /// Position of the node's action in verb order (0 for the root).
    pub ordinal: Vec<usize>,
}

pub fn prepare_graph(enc: &dyn TextEncoder, g: &SemanticGraph) -> Result<GraphInput, DiffusionError> {
    let e = embed_graph(enc, g)?;
    let rows: Vec<f32> = e.in_graph_order(g).into_iter().flatten().map(|v| v as f32).collect();
    let mut action_rank = std::collections::HashMap::new();
    for (k, n) in g.nodes_at(Level::Action).enumerate() {
        action_rank.insert(n.id.clone(), k);
    }
    let ordinal = g
        .nodes
        .iter()
        .map(|n| match n.level {
            Level::Motion => 0,
            Level::Action => action_rank[&n.id],
            Level::Specific => g.parent_edge(&n.id).and_then(|e| action_rank.get(&e.src).copied()).unwrap_or(0),
        })
        .collect();
    Ok(GraphInput { graph: g.clone(), rows, dim: e.dim, ordinal })
}

/// Condition tokens seen by the denoiser of `level`: node tokens of this and
/// every coarser level, plus the coarser level's latent tokens.
pub fn condition_token_count(level: Level, g: &SemanticGraph, latents: &[LatentShape; 3]) -> usize {
    let m = g.count(Level::Motion);
    let a = g.count(Level::Action);
    let s = g.count(Level::Specific);
    match level {
        Level::Motion => m,
        Level::Action => m + a + latents[0].tokens,
        Level::Specific => m + a + s + latents[1].tokens,
    }
}

/// Node rows of a batch, gathered per sample for one level.
struct CondLayout {
    /// `(B·K)` rows into the packed node tensor.
    index: Vec<u32>,
    kind: Vec<u32>,
    ordinal: Vec<u32>,
    valid: Vec<f32>,
    k: usize,
}

impl CondLayout {
    fn new(inputs: &[&GraphInput], offsets: &[usize], level: Level, max_actions: usize) -> Self {
        let keep = |l: Level| level_slot(l) <= level_slot(level);
        let per: Vec<Vec<(usize, usize, usize)>> = inputs
            .iter()
            .zip(offsets)
            .map(|(gi, &off)| {
                gi.graph
                    .nodes
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| keep(n.level))
                    .map(|(i, n)| (off + i, level_slot(n.level), gi.ordinal[i].min(max_actions - 1)))
                    .collect()
            })
            .collect();
        let k = per.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut out = CondLayout { index: vec![], kind: vec![], ordinal: vec![], valid: vec![], k };
        for rows in &per {
            for j in 0..k {
                let (idx, kind, ord, ok) = rows.get(j).map_or((0, 0, 0, 0.0), |&(i, kd, o)| (i, kd, o, 1.0));
                out.index.push(idx as u32);
                out.kind.push(kind as u32);
                out.ordinal.push(ord as u32);
                out.valid.push(ok);
            }
        }
        out
    }

    /// The same rows repeated `times` along the batch.
    fn repeat(&self, times: usize) -> Self {
        CondLayout {
            index: self.index.repeat(times),
            kind: self.kind.repeat(times),
            ordinal: self.ordinal.repeat(times),
            valid: self.valid.repeat(times),
            k: self.k,
        }
    }
}

struct LevelDenoiser {
    width: usize,
    z_in: Linear,
    z_pos: Tensor,
    t_in: Linear,
    t_out: Linear,
    node_in: Linear,
    prev: Option<(Linear, Tensor)>,
    /// Rows: motion node, action node, specific node, coarser latent.
    kind: Tensor,
    ordinal: Tensor,
    null: Tensor,
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
    out: Linear,
}

impl LevelDenoiser {
    fn new(ps: &mut ParamStore, level: Level, cfg: &DiffusionConfig) -> candle_core::Result<Self> {
        let d = cfg.denoiser;
        let w = d.width;
        let name = format!("den.{}", level.as_str());
        let shape = cfg.latents[level_slot(level)];
        let n = |s: &str| format!("{name}.{s}");
        let z_in = Linear::new(ps, &n("z_in"), shape.dim, w)?;
        let z_pos = ps.uniform(&n("z_pos"), &[shape.tokens, w], 0.1)?;
        let t_in = Linear::new(ps, &n("t_in"), w, w)?;
        let t_out = Linear::new(ps, &n("t_out"), w, w)?;
        let node_in = Linear::new(ps, &n("node_in"), cfg.gat.dim, w)?;
        let prev = match level {
            Level::Motion => None,
            _ => {
                let p = cfg.latents[level_slot(level) - 1];
                Some((Linear::new(ps, &n("prev_in"), p.dim, w)?, ps.uniform(&n("prev_pos"), &[p.tokens, w], 0.1)?))
            }
        };
        let kind = ps.uniform(&n("kind"), &[4, w], 0.1)?;
        let ordinal = ps.uniform(&n("ordinal"), &[d.max_actions, w], 0.1)?;
        let null = ps.uniform(&n("null"), &[w], 0.1)?;
        let layers = (0..d.layers)
            .map(|i| TransformerLayer::new(ps, &n(&format!("layer{i}")), w, d.heads, d.ff))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let norm = LayerNorm::new(ps, &n("norm"), w)?;
        let out = Linear::new(ps, &n("out"), w, shape.dim)?;
        Ok(LevelDenoiser { width: w, z_in, z_pos, t_in, t_out, node_in, prev, kind, ordinal, null, layers, norm, out })
    }

    /// Noise prediction `(B, C, D′)`. Rows with `drop` set see only the null
    /// token in place of their condition set.
    fn forward(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        nodes: &Tensor,
        layout: &CondLayout,
        prev: Option<&Tensor>,
        drop: &[bool],
    ) -> candle_core::Result<Tensor> {
        let (b, c, _) = z_t.dims3()?;
        let w = self.width;
        let dev = Device::Cpu;
        let dt = z_t.dtype();
        let z = self.z_in.forward(z_t)?.broadcast_add(&self.z_pos)?;
        let tpos: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let temb = sinusoid_embed(&tpos, w, &dev, dt)?;
        let temb = self.t_out.forward(&self.t_in.forward(&temb)?.gelu()?)?.reshape((b, 1, w))?;
        let null = self.null.reshape((1, 1, w))?.broadcast_as((b, 1, w))?;
        let k = layout.k;
        let idx = Tensor::from_slice(&layout.index, b * k, &dev)?;
        let kind = Tensor::from_slice(&layout.kind, b * k, &dev)?;
        let ord = Tensor::from_slice(&layout.ordinal, b * k, &dev)?;
        let node_tok = (self.node_in.forward(&nodes.index_select(&idx, 0)?)?
            + self.kind.index_select(&kind, 0)?
            + self.ordinal.index_select(&ord, 0)?)?
            .reshape((b, k, w))?;
        let keep: Vec<f32> = drop.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let mut valid_rows: Vec<f32> = Vec::with_capacity(b * (c + 2 + k));
        let cp = self.prev.as_ref().map_or(0, |(_, pos)| pos.dim(0).unwrap_or(0));
        for i in 0..b {
            valid_rows.extend(std::iter::repeat_n(1.0, c + 1));
            valid_rows.push(1.0 - keep[i]);
            valid_rows.extend(layout.valid[i * k..(i + 1) * k].iter().map(|v| v * keep[i]));
            valid_rows.extend(std::iter::repeat_n(keep[i], cp));
        }
        let mut parts = vec![z, temb, null, node_tok];
        if let (Some((lin, pos)), Some(p)) = (&self.prev, prev) {
            let kind3 = self.kind.narrow(0, 3, 1)?;
            parts.push(lin.forward(p)?.broadcast_add(pos)?.broadcast_add(&kind3)?);
        }
        let x = Tensor::cat(&parts, 1)?;
        let valid = Tensor::from_vec(valid_rows, (b, x.dim(1)?), &dev)?.to_dtype(dt)?;
        let bias = key_padding_bias(&valid)?;
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(&h, Some(&bias))?;
        }
        self.out.forward(&self.norm.forward(&h.narrow(1, 0, c)?)?)
    }
}

/// Graph reasoning plus the three level denoisers.
pub struct HierarchicalDenoiser {
    pub config: DiffusionConfig,
    /// Multiplier taking VAE posterior means to unit scale, per level.
    pub latent_scale: [f64; 3],
    pub params: ParamStore,
    pub schedule: NoiseSchedule,
    gat: Vec<GATLayerParams>,
    levels: Vec<LevelDenoiser>,
}

/// Packed GAT inputs of a batch.
struct Packed {
    batch: GraphBatch,
    nodes: Tensor,
}

impl HierarchicalDenoiser {
    pub fn new(config: DiffusionConfig, latent_scale: [f64; 3], seed: u64) -> Result<Self, DiffusionError> {
        config.check()?;
        let mut ps = ParamStore::new(seed, DType::F32);
        let gat = (0..config.gat.layers)
            .map(|i| GATLayerParams::new(&mut ps, &format!("gat.{i}"), config.gat.dim))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let levels = LEVELS
            .iter()
            .map(|&l| LevelDenoiser::new(&mut ps, l, &config))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let schedule = config.schedule()?;
        Ok(HierarchicalDenoiser { config, latent_scale, params: ps, schedule, gat, levels })
    }

    fn pack(&self, inputs: &[&GraphInput]) -> Result<Packed, DiffusionError> {
        let graphs: Vec<&SemanticGraph> = inputs.iter().map(|g| &g.graph).collect();
        let batch = GraphBatch::new(&graphs, self.config.gat.bidirectional)?;
        let d = self.config.gat.dim;
        let mut rows = Vec::with_capacity(batch.num_nodes * d);
        for g in inputs {
            if g.dim != d {
                return Err(DiffusionError::Config(format!("node vectors have dimension {}, expected {d}", g.dim)));
            }
            rows.extend_from_slice(&g.rows);
        }
        let v = Tensor::from_vec(rows, (batch.num_nodes, d), &Device::Cpu)?;
        let nodes = reason_batch(&self.gat, &batch, &v)?;
        Ok(Packed { batch, nodes })
    }

    /// Whether the conditional branch exists at all; a model trained with
    /// dropout 1 has only ever seen the null token.
    fn conditional(&self) -> bool {
        self.config.cond_dropout < 1.0
    }

    /// Guided noise prediction for one level over a batch.
    #[allow(clippy::too_many_arguments)]
    fn guided_eps(
        &self,
        level: Level,
        z_t: &Tensor,
        t: usize,
        packed: &Packed,
        layout: &CondLayout,
        prev: Option<&Tensor>,
        guidance: f64,
    ) -> candle_core::Result<Tensor> {
        let den = &self.levels[level_slot(level)];
        let b = z_t.dim(0)?;
        let cond_ok = self.conditional();
        if guidance == 0.0 || !cond_ok {
            return den.forward(z_t, &vec![t; b], &packed.nodes, layout, prev, &vec![true; b]);
        }
        if guidance == 1.0 {
            return den.forward(z_t, &vec![t; b], &packed.nodes, layout, prev, &vec![false; b]);
        }
        let z2 = Tensor::cat(&[z_t, z_t], 0)?;
        let prev2 = prev.map(|p| Tensor::cat(&[p, p], 0)).transpose()?;
        let mut drop = vec![false; b];
        drop.extend(vec![true; b]);
        let both = den.forward(&z2, &vec![t; 2 * b], &packed.nodes, &layout.repeat(2), prev2.as_ref(), &drop)?;
        cfg_combine(&both.narrow(0, 0, b)?, &both.narrow(0, b, b)?, guidance)
    }

    /// Guided noise prediction for one level at a single timestep.
    pub fn predict_noise(
        &self,
        level: Level,
        inputs: &[&GraphInput],
        z_t: &Tensor,
        t: usize,
        prev: Option<&Tensor>,
        guidance: f64,
    ) -> Result<Tensor, DiffusionError> {
        let packed = self.pack(inputs)?;
        let layout = CondLayout::new(inputs, &packed.batch.offsets, level, self.config.denoiser.max_actions);
        Ok(self.guided_eps(level, z_t, t, &packed, &layout, prev, guidance)?)
    }

    /// Conditional and unconditional predictions, each from its own pass.
    pub fn predict_branches(
        &self,
        level: Level,
        inputs: &[&GraphInput],
        z_t: &Tensor,
        t: usize,
        prev: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor), DiffusionError> {
        let packed = self.pack(inputs)?;
        let layout = CondLayout::new(inputs, &packed.batch.offsets, level, self.config.denoiser.max_actions);
        let den = &self.levels[level_slot(level)];
        let b = z_t.dim(0)?;
        let cond = den.forward(z_t, &vec![t; b], &packed.nodes, &layout, prev, &vec![false; b])?;
        let uncond = den.forward(z_t, &vec![t; b], &packed.nodes, &layout, prev, &vec![true; b])?;
        Ok((cond, uncond))
    }

    /// Total condition tokens the level's denoiser attends to for `g`.
    pub fn condition_tokens(&self, level: Level, g: &GraphInput) -> usize {
        let layout = CondLayout::new(&[g], &[0], level, self.config.denoiser.max_actions);
        let nodes = layout.valid.iter().filter(|&&v| v > 0.0).count();
        nodes + self.levels[level_slot(level)].prev.as_ref().map_or(0, |(_, p)| p.dim(0).unwrap_or(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 3000,
            batch: 64,
            optim: OptimConfig { lr: 1e-3, steps: 3000, warmup: 100, ..OptimConfig::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainReport {
    /// Per-step loss of each level term.
    pub curves: [Vec<f64>; 3],
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub rng: crate::nn::RngState,
}

impl DiffusionTrainReport {
    /// Mean of each term over the first and the last epoch.
    pub fn first_last_epoch(&self) -> [(f64, f64); 3] {
        let e = self.steps_per_epoch.max(1);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        std::array::from_fn(|i| {
            let c = &self.curves[i];
            let k = e.min(c.len());
            (mean(&c[..k]), mean(&c[c.len() - k..]))
        })
    }
}

/// Posterior means of every motion, row-major `(N, C·D′)`.
fn posterior_means(vae: &MotionVae, motions: &[&MotionSequence]) -> Result<Vec<f32>, DiffusionError> {
    let mut order: Vec<usize> = (0..motions.len()).collect();
    order.sort_by_key(|&i| motions[i].len());
    let per = vae.config.tokens * vae.config.latent_dim;
    let mut out = vec![0f32; motions.len() * per];
    for chunk in order.chunks(64) {
        let ms: Vec<&MotionSequence> = chunk.iter().map(|&i| motions[i]).collect();
        let batch = MotionBatch::new(&ms, &vae.normalizer, DType::F32)?;
        let mu: Vec<f32> = vae.encode_batch(&batch)?.mu.flatten_all()?.to_vec1()?;
        for (j, &i) in chunk.iter().enumerate() {
            out[i * per..(i + 1) * per].copy_from_slice(&mu[j * per..(j + 1) * per]);
        }
    }
    Ok(out)
}

fn gather(values: &[f32], idx: &[usize], shape: LatentShape) -> candle_core::Result<Tensor> {
    let per = shape.tokens * shape.dim;
    let mut v = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        v.extend_from_slice(&values[i * per..(i + 1) * per]);
    }
    Tensor::from_vec(v, (idx.len(), shape.tokens, shape.dim), &Device::Cpu)
}

fn normal_tensor(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> candle_core::Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2;
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
}

/// Trains the graph reasoner and the three denoisers jointly on the summed
/// per-level noise-prediction losses. The VAEs are only read.
pub fn train_diffusion(
    inputs: &[GraphInput],
    motions: &[&MotionSequence],
    vaes: &VaeSet,
    config: DiffusionConfig,
    train: DiffusionTrainConfig,
) -> Result<(HierarchicalDenoiser, DiffusionTrainReport), DiffusionError> {
    if inputs.is_empty() || inputs.len() != motions.len() {
        return Err(DiffusionError::Config(format!("{} graphs for {} motions", inputs.len(), motions.len())));
    }
    let mut latents = Vec::with_capacity(3);
    let mut scale = [1.0; 3];
    for l in LEVELS {
        let vae = vaes.get(l)?;
        let shape = config.latents[level_slot(l)];
        if (vae.config.tokens, vae.config.latent_dim) != (shape.tokens, shape.dim) {
            return Err(DiffusionError::Config(format!("{} VAE latent shape does not match the denoiser", l.as_str())));
        }
        let mut mu = posterior_means(vae, motions)?;
        let n = mu.len() as f64;
        let mean = mu.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = mu.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let s = 1.0 / var.sqrt().max(1e-6);
        mu.iter_mut().for_each(|v| *v = (*v as f64 * s) as f32);
        scale[level_slot(l)] = s;
        latents.push(mu);
    }
    let model = HierarchicalDenoiser::new(config, scale, train.seed)?;
    let mut opt = Optim::new(model.params.vars(), OptimConfig { steps: train.steps, ..train.optim })?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x6469_6666);
    let big_t = model.schedule.steps;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let bsz = train.batch.clamp(1, inputs.len());
    let steps_per_epoch = inputs.len().div_ceil(bsz);
    let mut cursor = order.len();
    let mut curves: [Vec<f64>; 3] = Default::default();
    for step in 0..train.steps {
        if cursor + bsz > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bsz];
        cursor += bsz;
        let batch_inputs: Vec<&GraphInput> = idx.iter().map(|&i| &inputs[i]).collect();
        let packed = model.pack(&batch_inputs)?;
        let mut total: Option<Tensor> = None;
        let mut terms = [0.0; 3];
        for l in LEVELS {
            let s = level_slot(l);
            let shape = config.latents[s];
            let z0 = gather(&latents[s], idx, shape)?;
            let ts: Vec<usize> = (0..bsz).map(|_| rng.random_range(1..=big_t)).collect();
            let eps = normal_tensor((bsz, shape.tokens, shape.dim), &mut rng)?;
            let z_t = q_sample_tensor(&model.schedule, &z0, &ts, &eps)?;
            let drop: Vec<bool> = (0..bsz).map(|_| rng.random_bool(config.cond_dropout)).collect();
            let prev = if s > 0 { Some(gather(&latents[s - 1], idx, config.latents[s - 1])?) } else { None };
            let layout = CondLayout::new(&batch_inputs, &packed.batch.offsets, l, config.denoiser.max_actions);
            let pred = model.levels[s].forward(&z_t, &ts, &packed.nodes, &layout, prev.as_ref(), &drop)?;
            let loss = mse(&pred, &eps)?;
            terms[s] = scalar_f64(&loss)?;
            total = Some(match total {
                None => loss,
                Some(t) => (t + loss)?,
            });
        }
        let total = total.expect("three levels");
        let sum: f64 = terms.iter().sum();
        if !sum.is_finite() {
            return Err(DiffusionError::Diverged { step, loss: sum });
        }
        opt.step(&total)?;
        for (c, v) in curves.iter_mut().zip(terms) {
            c.push(v);
        }
        if (step + 1) % 100 == 0 || step + 1 == train.steps {
            let w = |c: &Vec<f64>| c[c.len().saturating_sub(100)..].iter().sum::<f64>() / c.len().min(100) as f64;
            log::info!(
                "diffusion step {} motion {:.4} action {:.4} specific {:.4}",
                step + 1,
                w(&curves[0]),
                w(&curves[1]),
                w(&curves[2])
            );
        }
    }
    Ok((model, DiffusionTrainReport { curves, steps_per_epoch, seed: train.seed, rng: crate::nn::RngState::capture(&rng) }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// DDIM steps for motion, action, specific.
    pub steps: [usize; 3],
    /// Guidance scale α′.
    pub guidance: f64,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: [15, 15, 20], guidance: 7.5, eta: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn check(&self, schedule: &NoiseSchedule) -> Result<(), DiffusionError> {
        if self.steps.iter().any(|&s| s == 0 || s > schedule.steps) {
            return Err(DiffusionError::Config(format!("step counts {:?} must be in [1, {}]", self.steps, schedule.steps)));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) || !(0.0..=1.0).contains(&self.eta) {
            return Err(DiffusionError::Config(format!("guidance {} and eta {} out of range", self.guidance, self.eta)));
        }
        Ok(())
    }
}

/// Result for one prompt; latents are in VAE space.
#[derive(Debug, Clone)]
pub struct HierarchicalSample {
    pub z_motion: LatentSeq,
    pub z_action: LatentSeq,
    pub z_specific: LatentSeq,
    /// Decode of the specific-level latent.
    pub motion: MotionSequence,
    pub decoded_motion_level: MotionSequence,
    pub decoded_action_level: MotionSequence,
}

fn latent_seqs(t: &Tensor, level: Level, scale: f64) -> candle_core::Result<Vec<LatentSeq>> {
    let (b, c, d) = t.dims3()?;
    let v: Vec<f64> = (t.to_dtype(DType::F64)? / scale)?.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| LatentSeq { level, tokens: c, dim: d, values: v[i * c * d..(i + 1) * c * d].to_vec() })
        .collect())
}

/// Coarse-to-fine generation for a batch of prompts with the given frame
/// counts. Each prompt draws its initial noise from its own stream of
/// `config.seed`, so results do not depend on batch composition at eta 0.
pub fn sample_hierarchical(
    model: Option<&HierarchicalDenoiser>,
    vaes: &VaeSet,
    inputs: &[&GraphInput],
    frames: &[usize],
    config: &SamplerConfig,
) -> Result<Vec<HierarchicalSample>, DiffusionError> {
    let model = model.ok_or_else(|| DiffusionError::MissingCheckpoint("denoiser".into()))?;
    let vae = [vaes.get(Level::Motion)?, vaes.get(Level::Action)?, vaes.get(Level::Specific)?];
    config.check(&model.schedule)?;
    if inputs.len() != frames.len() || frames.contains(&0) {
        return Err(DiffusionError::Config("one positive frame count per prompt is required".into()));
    }
    if inputs.is_empty() {
        return Ok(vec![]);
    }
    let b = inputs.len();
    let packed = model.pack(inputs)?;
    let mut streams: Vec<ChaCha8Rng> = (0..b)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut eta_rng = ChaCha8Rng::seed_from_u64(config.seed);
    eta_rng.set_stream(u64::MAX);
    let mut prev: Option<Tensor> = None;
    let mut out_latents = Vec::with_capacity(3);
    for l in LEVELS {
        let s = level_slot(l);
        let shape = model.config.latents[s];
        let init: Vec<Tensor> = streams
            .iter_mut()
            .map(|r| normal_tensor((1, shape.tokens, shape.dim), r))
            .collect::<candle_core::Result<_>>()?;
        let init = Tensor::cat(&init, 0)?;
        let layout = CondLayout::new(inputs, &packed.batch.offsets, l, model.config.denoiser.max_actions);
        let timesteps = model.schedule.ddim_timesteps(config.steps[s]);
        let z = ddim_loop(&model.schedule, init, &timesteps, config.eta, &mut eta_rng, |z, t| {
            // detached so each step does not retain the previous steps' graphs
            Ok(model.guided_eps(l, z, t, &packed, &layout, prev.as_ref(), config.guidance)?.detach())
        })?;
        out_latents.push(z.clone());
        prev = Some(z);
    }
    let mut decoded = Vec::with_capacity(3);
    let mut seqs = Vec::with_capacity(3);
    for l in LEVELS {
        let s = level_slot(l);
        let z = (&out_latents[s] / model.latent_scale[s])?;
        let x = vae[s].decode_batch(&z, frames)?;
        decoded.push(vae[s].to_motions(&x, frames)?);
        seqs.push(latent_seqs(&out_latents[s], l, model.latent_scale[s])?);
    }
    let mut decoded = decoded.into_iter();
    let (dm, da, ds) = (decoded.next().unwrap(), decoded.next().unwrap(), decoded.next().unwrap());
    let mut seqs = seqs.into_iter();
    let (zm, za, zs) = (seqs.next().unwrap(), seqs.next().unwrap(), seqs.next().unwrap());
    Ok(dm
        .into_iter()
        .zip(da)
        .zip(ds)
        .zip(zm.into_iter().zip(za).zip(zs))
        .map(|(((m, a), s), ((z_motion, z_action), z_specific))| HierarchicalSample {
            z_motion,
            z_action,
            z_specific,
            motion: s,
            decoded_motion_level: m,
            decoded_action_level: a,
        })
        .collect())
}
