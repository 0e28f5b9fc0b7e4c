//! Small transformer building blocks over candle with deterministic,
//! host-seeded parameter initialization.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Result<T> = candle_core::Result<T>;

/// Named trainable variables created in a fixed order from a seeded stream.
pub struct ParamStore {
    vars: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

/// Host copy of one parameter for checkpointing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore { vars: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: Device::Cpu, dtype }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn push(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.vars.push((name.to_string(), v));
        Ok(out)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.push(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.push(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn export(&self) -> Result<Vec<ParamBlob>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                Ok(ParamBlob {
                    name: name.clone(),
                    shape: v.dims().to_vec(),
                    values: v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
                })
            })
            .collect()
    }

    /// Overwrites every parameter from `blobs`; names and shapes must match.
    pub fn import(&self, blobs: &[ParamBlob]) -> Result<()> {
        if blobs.len() != self.vars.len() {
            candle_core::bail!("expected {} parameters, found {}", self.vars.len(), blobs.len());
        }
        for ((name, var), b) in self.vars.iter().zip(blobs) {
            if &b.name != name || b.shape != var.dims() {
                candle_core::bail!("parameter {name} {:?} does not match blob {} {:?}", var.dims(), b.name, b.shape);
            }
            let t = Tensor::from_vec(b.values.clone(), b.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// True when any parameter holds a non-finite value.
    pub fn any_non_finite(&self) -> Result<bool> {
        for (_, v) in &self.vars {
            let s: f64 = v.as_tensor().abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar()?;
            if !s.is_finite() {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = ps.uniform(&format!("{name}.w"), &[d_in, d_out], bound)?;
        let b = ps.uniform(&format!("{name}.b"), &[d_out], bound)?;
        Ok(Linear { w, b: Some(b) })
    }

    pub fn no_bias(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Linear { w: ps.uniform(&format!("{name}.w"), &[d_in, d_out], bound)?, b: None })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().unwrap();
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.w)?;
        let y = match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.w.dim(1)?;
        y.reshape(out)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: ps.constant(&format!("{name}.gamma"), &[d], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[d], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Additive attention bias `(B, 1, 1, L)` from a `(B, L)` validity mask
/// (1 = attend, 0 = padding).
pub fn key_padding_bias(valid: &Tensor) -> Result<Tensor> {
    let (b, l) = valid.dims2()?;
    ((valid - 1.0)? * 1e9)?.reshape((b, 1, 1, l))
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        if d % heads != 0 {
            candle_core::bail!("width {d} is not divisible by {heads} heads");
        }
        Ok(MultiHeadAttention {
            qkv: Linear::new(ps, &format!("{name}.qkv"), d, 3 * d)?,
            out: Linear::new(ps, &format!("{name}.out"), d, d)?,
            heads,
        })
    }

    /// Self-attention over `x: (B, L, d)` with optional additive `bias`.
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, l, 3, self.heads, hd))?;
        let pick = |i: usize| -> Result<Tensor> { qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous() };
        let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let scores = match bias {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, l, d))?;
        self.out.forward(&y)
    }
}

/// Pre-norm transformer encoder layer with a GELU feed-forward block.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerLayer {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, ff: usize) -> Result<Self> {
        Ok(TransformerLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d)?,
            ff1: Linear::new(ps, &format!("{name}.ff1"), d, ff)?,
            ff2: Linear::new(ps, &format!("{name}.ff2"), ff, d)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, bias)?)?;
        let h = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&x)?)?.gelu_erf()?)?;
        x + h
    }
}

/// Transformer whose first half of layers feeds long skip connections into
/// the second half (U-Net style); `layers` must be odd.
#[derive(Debug, Clone)]
pub struct SkipTransformer {
    input: Vec<TransformerLayer>,
    middle: TransformerLayer,
    output: Vec<(Linear, TransformerLayer)>,
    norm: LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
}

impl SkipTransformer {
    pub fn new(ps: &mut ParamStore, name: &str, c: TransformerConfig) -> Result<Self> {
        if c.layers % 2 == 0 {
            candle_core::bail!("skip transformer needs an odd layer count, got {}", c.layers);
        }
        let half = c.layers / 2;
        let input = (0..half)
            .map(|i| TransformerLayer::new(ps, &format!("{name}.in{i}"), c.width, c.heads, c.ff))
            .collect::<Result<_>>()?;
        let middle = TransformerLayer::new(ps, &format!("{name}.mid"), c.width, c.heads, c.ff)?;
        let output = (0..half)
            .map(|i| {
                Ok((
                    Linear::new(ps, &format!("{name}.skip{i}"), 2 * c.width, c.width)?,
                    TransformerLayer::new(ps, &format!("{name}.out{i}"), c.width, c.heads, c.ff)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(SkipTransformer { input, middle, output, norm: LayerNorm::new(ps, &format!("{name}.norm"), c.width)? })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.input.len());
        let mut x = x.clone();
        for l in &self.input {
            x = l.forward(&x, bias)?;
            skips.push(x.clone());
        }
        x = self.middle.forward(&x, bias)?;
        for (proj, l) in &self.output {
            let s = skips.pop().unwrap();
            x = proj.forward(&Tensor::cat(&[&x, &s], D::Minus1)?)?;
            x = l.forward(&x, bias)?;
        }
        self.norm.forward(&x)
    }
}

/// Sinusoidal position table `(len, d)` on the host.
pub fn sinusoid_table(len: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0f32; len * d];
    for p in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * k / d as f64);
            out[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}

/// Sinusoidal embedding of scalar positions, e.g. diffusion timesteps: `(n, d)`.
pub fn sinusoid_embed(positions: &[f64], d: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let half = d / 2;
    let mut out = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for i in 0..d {
            let k = (i % half) as f64;
            let angle = p / 10000f64.powf(k / half as f64);
            out.push(if i < half { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_vec(out, (positions.len(), d), device)?.to_dtype(dtype)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip: f64,
    pub warmup: usize,
    /// Total steps for the cosine decay to `min_lr_frac · lr`.
    pub steps: usize,
    pub min_lr_frac: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-3, weight_decay: 0.0, clip: 1.0, warmup: 50, steps: 1000, min_lr_frac: 0.1 }
    }
}

/// AdamW with warmup, cosine decay and gradient clipping.
pub struct Optim {
    opt: AdamW,
    vars: Vec<Var>,
    cfg: OptimConfig,
    step: usize,
}

impl Optim {
    pub fn new(vars: Vec<Var>, cfg: OptimConfig) -> Result<Self> {
        let opt = AdamW::new(vars.clone(), ParamsAdamW { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() })?;
        Ok(Optim { opt, vars, cfg, step: 0 })
    }

    pub fn learning_rate(&self) -> f64 {
        let c = &self.cfg;
        if self.step < c.warmup {
            return c.lr * (self.step + 1) as f64 / c.warmup as f64;
        }
        let span = c.steps.saturating_sub(c.warmup).max(1) as f64;
        let p = ((self.step - c.warmup) as f64 / span).min(1.0);
        let floor = c.lr * c.min_lr_frac;
        floor + (c.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }

    /// Backpropagates `loss`, clips, and updates; returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += scalar_f64(&g.sqr()?.sum_all()?)?;
            }
        }
        let norm = sq.sqrt();
        if self.cfg.clip > 0.0 && norm > self.cfg.clip {
            let scale = self.cfg.clip / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        self.opt.set_learning_rate(self.learning_rate());
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(norm)
    }
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Word position, as a decimal string since it is 128 bits wide.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        let key: [u8; 32] = hex::decode(&self.seed).ok()?.try_into().ok()?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

/// Mean of `(a - b)²` over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    (a - b)?.sqr()?.mean_all()
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::new(3, DType::F32);
        let mut b = ParamStore::new(3, DType::F32);
        let x = a.uniform("x", &[4, 4], 0.5).unwrap();
        let y = b.uniform("x", &[4, 4], 0.5).unwrap();
        assert_eq!(x.to_vec2::<f32>().unwrap(), y.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn export_import_round_trip() {
        let mut ps = ParamStore::new(1, DType::F32);
        let lin = Linear::new(&mut ps, "l", 3, 2).unwrap();
        let blobs = ps.export().unwrap();
        let mut other = ParamStore::new(99, DType::F32);
        let lin2 = Linear::new(&mut other, "l", 3, 2).unwrap();
        other.import(&blobs).unwrap();
        assert_eq!(lin.w.to_vec2::<f32>().unwrap(), lin2.w.to_vec2::<f32>().unwrap());
        let mut wrong = ParamStore::new(0, DType::F32);
        Linear::new(&mut wrong, "k", 3, 2).unwrap();
        assert!(wrong.import(&blobs).is_err());
    }

    #[test]
    fn padding_keys_are_ignored() {
        let mut ps = ParamStore::new(0, DType::F64);
        let attn = MultiHeadAttention::new(&mut ps, "a", 4, 2).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0.0, 1.0, (1, 3, 4), &dev).unwrap();
        let mut y = x.clone().to_vec3::<f64>().unwrap();
        y[0][2] = vec![100.0; 4];
        let y = Tensor::new(y, &dev).unwrap();
        let valid = Tensor::new(&[[1.0f64, 1.0, 0.0]], &dev).unwrap();
        let bias = key_padding_bias(&valid).unwrap();
        let a = attn.forward(&x, Some(&bias)).unwrap().narrow(1, 0, 2).unwrap();
        let b = attn.forward(&y, Some(&bias)).unwrap().narrow(1, 0, 2).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn skip_transformer_learns_identity() {
        let mut ps = ParamStore::new(0, DType::F32);
        let c = TransformerConfig { width: 8, layers: 3, heads: 2, ff: 16 };
        let net = SkipTransformer::new(&mut ps, "t", c).unwrap();
        let head = Linear::new(&mut ps, "h", 8, 8).unwrap();
        let cfg = OptimConfig { lr: 1e-2, warmup: 10, steps: 150, ..Default::default() };
        let mut opt = Optim::new(ps.vars(), cfg).unwrap();
        let x = Tensor::randn(0f32, 1.0, (4, 5, 8), &Device::Cpu).unwrap();
        let loss = |net: &SkipTransformer| mse(&head.forward(&net.forward(&x, None).unwrap()).unwrap(), &x).unwrap();
        let first = scalar_f64(&loss(&net)).unwrap();
        for _ in 0..150 {
            opt.step(&loss(&net)).unwrap();
        }
        let last = scalar_f64(&loss(&net)).unwrap();
        assert!(last < 0.2 * first, "{first} -> {last}");
        assert!(SkipTransformer::new(&mut ps, "u", TransformerConfig { layers: 4, ..c }).is_err());
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        a.set_stream(4);
        for _ in 0..13 {
            a.random::<u32>();
        }
        let mut b = RngState::capture(&a).restore().unwrap();
        let xs: Vec<u64> = (0..5).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..5).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
    }
}
