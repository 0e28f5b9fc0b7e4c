//! Relation-factorized graph attention over semantic graphs.
//!
//! Per layer: `h = W v`;
//! `e_ij = LeakyReLU(Mᵀ[h_i, h_j]) + LeakyReLU(M_r[:, r_ij]ᵀ[h_i, h_j])` with
//! slope 0.2; coefficients `ẽ_ij = w_ij exp(e_ij) / Σ_k w_ik exp(e_ik)`;
//! output `ELU(Σ_j ẽ_ij h_j) + v_i`. Nodes whose neighbour weights sum to
//! zero pass through unchanged.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::NodeEmbeddings;
use crate::nn::ParamStore;
use crate::semgraph::{Relation, SemanticGraph};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameter stack is empty")]
    EmptyStack,
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type ReasonedEmbeddings = NodeEmbeddings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatConfig {
    pub dim: usize,
    pub layers: usize,
    /// Deliver messages along both directions of every edge. When off,
    /// messages flow from `src` to `dst` only.
    pub bidirectional: bool,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig { dim: crate::embed::DEFAULT_DIM, layers: 2, bidirectional: true }
    }
}

/// Host copy of one layer: `w` is row-major `D × D`, `m` has length `2D`,
/// `m_r` is row-major `2D × N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatHostParams {
    pub dim: usize,
    pub w: Vec<f64>,
    pub m: Vec<f64>,
    pub m_r: Vec<f64>,
}

impl GatHostParams {
    pub fn zeros(dim: usize) -> Self {
        GatHostParams { dim, w: vec![0.0; dim * dim], m: vec![0.0; 2 * dim], m_r: vec![0.0; 2 * dim * Relation::COUNT] }
    }

    pub fn identity_w(dim: usize) -> Self {
        let mut p = Self::zeros(dim);
        for i in 0..dim {
            p.w[i * dim + i] = 1.0;
        }
        p
    }

    /// Uniform in `±scale/√D` for every entry.
    pub fn random(dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let b = scale / (dim as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-b..=b)).collect::<Vec<f64>>();
        GatHostParams { dim, w: draw(dim * dim), m: draw(2 * dim), m_r: draw(2 * dim * Relation::COUNT) }
    }
}

/// One attention layer; tensors are backed by trainable variables.
#[derive(Debug, Clone)]
pub struct GATLayerParams {
    pub w: Tensor,
    pub m: Tensor,
    pub m_r: Tensor,
    pub dim: usize,
}

impl GATLayerParams {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> candle_core::Result<Self> {
        let b = 1.0 / (dim as f64).sqrt();
        Ok(GATLayerParams {
            w: ps.uniform(&format!("{name}.W"), &[dim, dim], b)?,
            m: ps.uniform(&format!("{name}.M"), &[2 * dim], b)?,
            m_r: ps.uniform(&format!("{name}.M_r"), &[2 * dim, Relation::COUNT], b)?,
            dim,
        })
    }

    pub fn from_host(p: &GatHostParams, dtype: DType) -> Result<Self, GraphError> {
        let d = p.dim;
        if p.w.len() != d * d || p.m.len() != 2 * d || p.m_r.len() != 2 * d * Relation::COUNT {
            return Err(GraphError::ShapeMismatch(format!("host parameters do not match width {d}")));
        }
        let var = |v: &[f64], shape: &[usize]| -> candle_core::Result<Tensor> {
            let t = Tensor::from_vec(v.to_vec(), shape, &Device::Cpu)?.to_dtype(dtype)?;
            Ok(Var::from_tensor(&t)?.as_tensor().clone())
        };
        Ok(GATLayerParams {
            w: var(&p.w, &[d, d])?,
            m: var(&p.m, &[2 * d])?,
            m_r: var(&p.m_r, &[2 * d, Relation::COUNT])?,
            dim: d,
        })
    }

    pub fn to_host(&self) -> Result<GatHostParams, GraphError> {
        let flat = |t: &Tensor| -> candle_core::Result<Vec<f64>> { t.to_dtype(DType::F64)?.flatten_all()?.to_vec1() };
        Ok(GatHostParams { dim: self.dim, w: flat(&self.w)?, m: flat(&self.m)?, m_r: flat(&self.m_r)? })
    }
}

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Effective logit of neighbour `j` for node `i`, including the edge weight:
/// `e_ij + ln w_ij` (negative infinity for weight zero). `h_i` and `h_j` are
/// already transformed by `W`.
pub fn attention_logits(p: &GatHostParams, h_i: &[f64], h_j: &[f64], relation: Relation, edge_weight: f64) -> f64 {
    let d = p.dim;
    let r = relation.index();
    let mut common = 0.0;
    let mut rel = 0.0;
    for k in 0..d {
        common += p.m[k] * h_i[k] + p.m[d + k] * h_j[k];
        rel += p.m_r[k * Relation::COUNT + r] * h_i[k] + p.m_r[(d + k) * Relation::COUNT + r] * h_j[k];
    }
    leaky_relu(common) + leaky_relu(rel) + edge_weight.ln()
}

/// Several graphs packed into one node list, with the message structure
/// precomputed.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    /// Start row of each graph.
    pub offsets: Vec<usize>,
    pub num_nodes: usize,
    recv: Vec<u32>,
    send: Vec<u32>,
    rel: Vec<u32>,
    weight: Vec<f64>,
    /// Receivers whose neighbour weights sum to zero.
    isolated: Vec<bool>,
}

impl GraphBatch {
    pub fn new(graphs: &[&SemanticGraph], bidirectional: bool) -> Result<Self, GraphError> {
        let mut b = GraphBatch {
            offsets: Vec::with_capacity(graphs.len()),
            num_nodes: 0,
            recv: vec![],
            send: vec![],
            rel: vec![],
            weight: vec![],
            isolated: vec![],
        };
        for g in graphs {
            let base = b.num_nodes;
            b.offsets.push(base);
            for e in &g.edges {
                let (Some(s), Some(d)) = (g.node_index(&e.src), g.node_index(&e.dst)) else {
                    return Err(GraphError::ShapeMismatch(format!("edge {}->{} references a missing node", e.src, e.dst)));
                };
                let mut push = |to: usize, from: usize| {
                    b.recv.push((base + to) as u32);
                    b.send.push((base + from) as u32);
                    b.rel.push(e.relation.index() as u32);
                    b.weight.push(e.weight);
                };
                push(d, s);
                if bidirectional {
                    push(s, d);
                }
            }
            b.num_nodes += g.nodes.len();
        }
        let mut wsum = vec![0.0; b.num_nodes];
        for (r, w) in b.recv.iter().zip(&b.weight) {
            wsum[*r as usize] += w;
        }
        b.isolated = wsum.iter().map(|&s| s <= 0.0).collect();
        Ok(b)
    }

    pub fn num_messages(&self) -> usize {
        self.recv.len()
    }
}

fn host_values(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()
}

/// `x ⊙ mask` where the mask is 1 for positive entries and the slope
/// otherwise, so the derivative at exactly zero is the slope.
fn leaky(x: &Tensor) -> candle_core::Result<Tensor> {
    let mask: Vec<f64> = host_values(x)?.into_iter().map(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE }).collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    x * mask
}

fn elu(x: &Tensor) -> candle_core::Result<Tensor> {
    let pos = x.relu()?;
    let neg = (x - &pos)?.exp()? - 1.0;
    pos + neg?
}

/// Output of one layer plus the normalized coefficients per message.
pub struct LayerOutput {
    pub out: Tensor,
    pub coefficients: Tensor,
}

/// One layer over a packed batch; `v` is `(num_nodes, D)`.
pub fn gat_layer_batch(p: &GATLayerParams, batch: &GraphBatch, v: &Tensor) -> Result<LayerOutput, GraphError> {
    let (n, d) = v.dims2()?;
    if n != batch.num_nodes || d != p.dim {
        return Err(GraphError::ShapeMismatch(format!("embeddings are {n}×{d}, expected {}×{}", batch.num_nodes, p.dim)));
    }
    let dev = v.device();
    let dt = v.dtype();
    let m = batch.num_messages();
    if m == 0 {
        // every node is isolated: ELU(0) + v
        return Ok(LayerOutput { out: v.clone(), coefficients: Tensor::zeros(0, dt, dev)? });
    }
    let nr = Relation::COUNT;
    let h = v.matmul(&p.w.t()?)?;
    let a1 = p.m.narrow(0, 0, d)?.reshape((d, 1))?;
    let a2 = p.m.narrow(0, d, d)?.reshape((d, 1))?;
    let f1 = h.matmul(&a1)?.flatten_all()?;
    let f2 = h.matmul(&a2)?.flatten_all()?;
    let s = h.matmul(&p.m_r.narrow(0, 0, d)?)?.flatten_all()?;
    let t = h.matmul(&p.m_r.narrow(0, d, d)?)?.flatten_all()?;

    let recv = Tensor::from_slice(&batch.recv, m, dev)?;
    let send = Tensor::from_slice(&batch.send, m, dev)?;
    let recv_rel: Vec<u32> = batch.recv.iter().zip(&batch.rel).map(|(i, r)| i * nr as u32 + r).collect();
    let send_rel: Vec<u32> = batch.send.iter().zip(&batch.rel).map(|(j, r)| j * nr as u32 + r).collect();
    let recv_rel = Tensor::from_vec(recv_rel, m, dev)?;
    let send_rel = Tensor::from_vec(send_rel, m, dev)?;

    let l1 = (f1.index_select(&recv, 0)? + f2.index_select(&send, 0)?)?;
    let l2 = (s.index_select(&recv_rel, 0)? + t.index_select(&send_rel, 0)?)?;
    let e = (leaky(&l1)? + leaky(&l2)?)?;

    // detached per-receiver shift for numerical stability
    let ev = host_values(&e)?;
    let mut shift = vec![f64::NEG_INFINITY; n];
    for (k, &r) in batch.recv.iter().enumerate() {
        shift[r as usize] = shift[r as usize].max(ev[k]);
    }
    let shift: Vec<f64> = batch.recv.iter().map(|&r| shift[r as usize]).collect();
    let shift = Tensor::from_vec(shift, m, dev)?.to_dtype(dt)?;
    let w = Tensor::from_vec(batch.weight.clone(), m, dev)?.to_dtype(dt)?;
    let ex = ((e - shift)?.exp()? * w)?;

    let mut inc = vec![0.0; n * m];
    for (k, &r) in batch.recv.iter().enumerate() {
        inc[r as usize * m + k] = 1.0;
    }
    let inc = Tensor::from_vec(inc, (n, m), dev)?.to_dtype(dt)?;
    let iso: Vec<f64> = batch.isolated.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let iso = Tensor::from_vec(iso, n, dev)?.to_dtype(dt)?;
    let denom = (inc.matmul(&ex.reshape((m, 1))?)?.flatten_all()? + iso)?;
    let coef = (ex / denom.index_select(&recv, 0)?)?;

    let msg = h.index_select(&send, 0)?.broadcast_mul(&coef.reshape((m, 1))?)?;
    let agg = inc.matmul(&msg)?;
    Ok(LayerOutput { out: (elu(&agg)? + v)?, coefficients: coef })
}

pub fn reason_batch(stack: &[GATLayerParams], batch: &GraphBatch, v: &Tensor) -> Result<Tensor, GraphError> {
    if stack.is_empty() {
        return Err(GraphError::EmptyStack);
    }
    let mut x = v.clone();
    for p in stack {
        x = gat_layer_batch(p, batch, &x)?.out;
    }
    Ok(x)
}

fn embeddings_tensor(g: &SemanticGraph, e: &NodeEmbeddings, dim: usize, dtype: DType) -> Result<Tensor, GraphError> {
    if e.index.len() != g.nodes.len() || g.nodes.iter().any(|n| e.get(&n.id).is_none()) {
        return Err(GraphError::ShapeMismatch("embeddings are not aligned with the graph".into()));
    }
    if e.dim != dim {
        return Err(GraphError::ShapeMismatch(format!("embedding width {} does not match layer width {dim}", e.dim)));
    }
    let rows: Vec<f64> = e.in_graph_order(g).concat();
    Ok(Tensor::from_vec(rows, (g.nodes.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

fn to_embeddings(g: &SemanticGraph, t: &Tensor) -> Result<NodeEmbeddings, GraphError> {
    let rows: Vec<Vec<f64>> = t.to_dtype(DType::F64)?.to_vec2()?;
    let mut e = NodeEmbeddings::from_graph_order(g, rows);
    e.dim = t.dim(1)?;
    Ok(e)
}

/// One layer on a single graph (bidirectional messages).
pub fn gat_layer(p: &GATLayerParams, embeds: &NodeEmbeddings, g: &SemanticGraph) -> Result<ReasonedEmbeddings, GraphError> {
    reason(std::slice::from_ref(p), g, embeds)
}

pub fn reason(stack: &[GATLayerParams], g: &SemanticGraph, embeds: &NodeEmbeddings) -> Result<ReasonedEmbeddings, GraphError> {
    reason_with(stack, g, embeds, true)
}

pub fn reason_with(
    stack: &[GATLayerParams],
    g: &SemanticGraph,
    embeds: &NodeEmbeddings,
    bidirectional: bool,
) -> Result<ReasonedEmbeddings, GraphError> {
    let first = stack.first().ok_or(GraphError::EmptyStack)?;
    let v = embeddings_tensor(g, embeds, first.dim, first.w.dtype())?;
    let batch = GraphBatch::new(&[g], bidirectional)?;
    to_embeddings(g, &reason_batch(stack, &batch, &v)?)
}

/// Normalized coefficients of one layer as `(receiver, sender, ẽ)` node
/// indices into `g.nodes`.
pub fn attention_coefficients(
    p: &GATLayerParams,
    g: &SemanticGraph,
    embeds: &NodeEmbeddings,
) -> Result<Vec<(usize, usize, f64)>, GraphError> {
    let v = embeddings_tensor(g, embeds, p.dim, p.w.dtype())?;
    let batch = GraphBatch::new(&[g], true)?;
    let c = host_values(&gat_layer_batch(p, &batch, &v)?.coefficients)?;
    Ok(batch.recv.iter().zip(&batch.send).zip(c).map(|((&r, &s), c)| (r as usize, s as usize, c)).collect())
}

/// Compares analytic parameter gradients of `probe(reason(...))` with central
/// finite differences (step `1e-5`, 64-bit) and returns the max relative
/// error `|a - n| / max(|a|, |n|, 1e-6)`. The floor sits far above the
/// central-difference roundoff (about 1e-11), so structurally zero gradients
/// are not scored on noise.
pub fn grad_check(
    params: &[GatHostParams],
    g: &SemanticGraph,
    embeds: &NodeEmbeddings,
    probe: &dyn Fn(&Tensor) -> candle_core::Result<Tensor>,
) -> Result<f64, GraphError> {
    let step = 1e-5;
    let eval = |hp: &[GatHostParams]| -> Result<(f64, Vec<GATLayerParams>, Tensor), GraphError> {
        let stack = hp.iter().map(|p| GATLayerParams::from_host(p, DType::F64)).collect::<Result<Vec<_>, _>>()?;
        let v = embeddings_tensor(g, embeds, hp[0].dim, DType::F64)?;
        let batch = GraphBatch::new(&[g], true)?;
        let y = probe(&reason_batch(&stack, &batch, &v)?)?;
        Ok((y.to_scalar::<f64>()?, stack, y))
    };
    let (_, stack, y) = eval(params)?;
    let grads = y.backward()?;
    let mut worst: f64 = 0.0;
    for (li, layer) in stack.iter().enumerate() {
        for (which, t) in [&layer.w, &layer.m, &layer.m_r].into_iter().enumerate() {
            let analytic = match grads.get(t) {
                Some(gr) => host_values(gr)?,
                None => vec![0.0; t.elem_count()],
            };
            for (k, a) in analytic.into_iter().enumerate() {
                let mut plus = params.to_vec();
                let mut minus = params.to_vec();
                *entry(&mut plus[li], which, k) += step;
                *entry(&mut minus[li], which, k) -= step;
                let num = (eval(&plus)?.0 - eval(&minus)?.0) / (2.0 * step);
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            }
        }
    }
    Ok(worst)
}

fn entry(p: &mut GatHostParams, which: usize, k: usize) -> &mut f64 {
    match which {
        0 => &mut p.w[k],
        1 => &mut p.m[k],
        _ => &mut p.m_r[k],
    }
}

/// Builds `layers` layers from a seed, as used by tests and tools.
pub fn random_stack(dim: usize, layers: usize, scale: f64, seed: u64) -> Vec<GatHostParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..layers).map(|_| GatHostParams::random(dim, scale, &mut rng)).collect()
}
