//! Per-level transformer motion VAE: `C` distribution tokens read a motion
//! into a `C × D′` latent; `C` latent tokens plus `L` positional query tokens
//! decode it back.

use candle_core::{DType, Device, Tensor, D};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motionrep::{FeatureLayout, MotionSequence, Normalizer};
use crate::nn::{key_padding_bias, scalar_f64, sinusoid_table, Linear, Optim, OptimConfig, ParamStore, SkipTransformer, TransformerConfig};
use crate::semgraph::Level;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("layout mismatch: model expects {expected} joints, motion has {found}")]
    LayoutMismatch { expected: usize, found: usize },
    #[error("latent has level {found:?} and {tokens} tokens; model is {expected:?} with {want} tokens")]
    LevelMismatch { expected: Level, found: Level, tokens: usize, want: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Motion(#[from] crate::motionrep::MotionError),
}

/// Latent token grid of one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSeq {
    pub level: Level,
    pub tokens: usize,
    pub dim: usize,
    /// Row-major `tokens × dim`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: LatentSeq,
    pub sigma: LatentSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub level: Level,
    pub tokens: usize,
    pub latent_dim: usize,
    pub width: usize,
    /// Layers per stack (odd, for the long skips).
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    /// KL weight λ.
    pub kl_weight: f64,
    pub joints: usize,
    /// Consecutive frames folded into one transformer token.
    pub patch: usize,
}

impl VaeConfig {
    pub fn desk(level: Level) -> Self {
        let tokens = match level {
            Level::Motion => 2,
            Level::Action => 4,
            Level::Specific => 8,
        };
        VaeConfig {
            level,
            tokens,
            latent_dim: 4,
            width: 64,
            layers: 3,
            heads: 2,
            ff: 128,
            kl_weight: 1e-4,
            joints: crate::motionrep::TOY_JOINTS,
            patch: 4,
        }
    }

    pub fn check(&self) -> Result<(), VaeError> {
        if self.kl_weight < 0.0 || !self.kl_weight.is_finite() {
            return Err(VaeError::Config(format!("KL weight {} must be nonnegative", self.kl_weight)));
        }
        if self.tokens == 0 || self.latent_dim == 0 || self.patch == 0 || self.layers % 2 == 0 || self.width % self.heads != 0 {
            return Err(VaeError::Config(format!("unsupported VAE shape {self:?}")));
        }
        Ok(())
    }

    fn stack(&self) -> TransformerConfig {
        TransformerConfig { width: self.width, layers: self.layers, heads: self.heads, ff: self.ff }
    }
}

/// Padded batch of normalized motions.
pub struct MotionBatch {
    /// `(B, L, F)`.
    pub x: Tensor,
    /// `(B, L)`, 1 for real frames.
    pub valid: Tensor,
    pub lens: Vec<usize>,
}

impl MotionBatch {
    pub fn new(motions: &[&MotionSequence], norm: &Normalizer, dtype: DType) -> Result<Self, VaeError> {
        let w = norm.width();
        let l = motions.iter().map(|m| m.len()).max().unwrap_or(0);
        let b = motions.len();
        let mut x = vec![0.0; b * l * w];
        let mut valid = vec![0.0; b * l];
        for (i, m) in motions.iter().enumerate() {
            let v = norm.normalize(m);
            x[i * l * w..i * l * w + v.len()].copy_from_slice(&v);
            valid[i * l..i * l + m.len()].iter_mut().for_each(|x| *x = 1.0);
        }
        let dev = Device::Cpu;
        Ok(MotionBatch {
            x: Tensor::from_vec(x, (b, l, w), &dev)?.to_dtype(dtype)?,
            valid: Tensor::from_vec(valid, (b, l), &dev)?.to_dtype(dtype)?,
            lens: motions.iter().map(|m| m.len()).collect(),
        })
    }

    /// Validity mask for `lens`, padded to the longest.
    pub fn mask(lens: &[usize], dtype: DType) -> candle_core::Result<Tensor> {
        let l = lens.iter().copied().max().unwrap_or(0);
        let mut valid = vec![0f32; lens.len() * l];
        for (i, &n) in lens.iter().enumerate() {
            valid[i * l..i * l + n].iter_mut().for_each(|x| *x = 1.0);
        }
        Tensor::from_vec(valid, (lens.len(), l), &Device::Cpu)?.to_dtype(dtype)
    }
}

/// Loss terms as scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

/// `KL(N(mu, exp(logvar)) ‖ N(0, I))` averaged over latent elements.
pub fn kl_standard_normal(mu: &Tensor, logvar: &Tensor) -> candle_core::Result<Tensor> {
    ((mu.sqr()? + logvar.exp()? - logvar)? - 1.0)?.mean_all()? * 0.5
}

/// Masked reconstruction error over real frames and all features.
pub fn masked_mse(recon: &Tensor, target: &Tensor, valid: &Tensor) -> candle_core::Result<Tensor> {
    let f = target.dim(D::Minus1)? as f64;
    let err = (recon - target)?.sqr()?.sum(D::Minus1)?;
    (err * valid)?.sum_all()? / (valid.sum_all()? * f)?
}

/// `(total, mse, kl)` with `total = mse + λ·kl`.
pub fn vae_loss_terms(
    recon: &Tensor,
    target: &Tensor,
    valid: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
    kl_weight: f64,
) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
    let mse = masked_mse(recon, target, valid)?;
    let kl = kl_standard_normal(mu, logvar)?;
    let total = (&mse + (&kl * kl_weight)?)?;
    Ok((total, mse, kl))
}

/// `(B, L, F)` frames to `(B, ceil(L/p), p·F)` tokens; a token is valid when
/// its first frame is.
pub fn patchify(x: &Tensor, valid: &Tensor, p: usize) -> candle_core::Result<(Tensor, Tensor)> {
    let (b, l, f) = x.dims3()?;
    let n = l.div_ceil(p);
    let (x, valid) = if n * p > l {
        (x.pad_with_zeros(1, 0, n * p - l)?, valid.pad_with_zeros(1, 0, n * p - l)?)
    } else {
        (x.clone(), valid.clone())
    };
    let tokens = x.reshape((b, n, p * f))?;
    let tok_valid = valid.reshape((b, n, p))?.narrow(2, 0, 1)?.squeeze(2)?;
    Ok((tokens, tok_valid))
}

pub struct MotionVae {
    pub config: VaeConfig,
    pub normalizer: Normalizer,
    pub params: ParamStore,
    frame_in: Linear,
    dist_tokens: Tensor,
    encoder: SkipTransformer,
    to_latent: Linear,
    from_latent: Linear,
    /// Identifies each latent slot to the decoder.
    latent_pos: Tensor,
    query: Tensor,
    decoder: SkipTransformer,
    frame_out: Linear,
}

/// Encoder output on a batch: `(B, C, D′)` mean and log-variance.
pub struct EncodedBatch {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl MotionVae {
    pub fn new(config: VaeConfig, normalizer: Normalizer, seed: u64) -> Result<Self, VaeError> {
        config.check()?;
        let f = FeatureLayout::new(config.joints).width();
        if normalizer.width() != f {
            return Err(VaeError::LayoutMismatch { expected: config.joints, found: normalizer.width().saturating_sub(8) / 12 });
        }
        let mut ps = ParamStore::new(seed, DType::F32);
        let w = config.width;
        let c = config.tokens;
        let frame_in = Linear::new(&mut ps, "enc.frame_in", f * config.patch, w)?;
        let dist_tokens = ps.uniform("enc.dist_tokens", &[2 * c, w], 1.0)?;
        let encoder = SkipTransformer::new(&mut ps, "enc", config.stack())?;
        let to_latent = Linear::new(&mut ps, "enc.to_latent", w, config.latent_dim)?;
        let from_latent = Linear::new(&mut ps, "dec.from_latent", config.latent_dim, w)?;
        let latent_pos = ps.uniform("dec.latent_pos", &[c, w], 1.0)?;
        let query = ps.uniform("dec.query", &[w], 1.0)?;
        let decoder = SkipTransformer::new(&mut ps, "dec", config.stack())?;
        let frame_out = Linear::new(&mut ps, "dec.frame_out", w, f * config.patch)?;
        Ok(MotionVae {
            config,
            normalizer,
            params: ps,
            frame_in,
            dist_tokens,
            encoder,
            to_latent,
            from_latent,
            latent_pos,
            query,
            decoder,
            frame_out,
        })
    }

    fn positions(&self, l: usize) -> candle_core::Result<Tensor> {
        let w = self.config.width;
        Tensor::from_vec(sinusoid_table(l, w), (1, l, w), &Device::Cpu)
    }

    fn check_layout(&self, m: &MotionSequence) -> Result<(), VaeError> {
        if m.layout.joints != self.config.joints {
            return Err(VaeError::LayoutMismatch { expected: self.config.joints, found: m.layout.joints });
        }
        Ok(())
    }

    pub fn encode_batch(&self, batch: &MotionBatch) -> Result<EncodedBatch, VaeError> {
        let b = batch.x.dim(0)?;
        let c = self.config.tokens;
        let (tokens, tok_valid) = patchify(&batch.x, &batch.valid, self.config.patch)?;
        let n = tokens.dim(1)?;
        let frames = self.frame_in.forward(&tokens)?.broadcast_add(&self.positions(n)?)?;
        let dist = self.dist_tokens.unsqueeze(0)?.broadcast_as((b, 2 * c, self.config.width))?;
        let x = Tensor::cat(&[&dist, &frames], 1)?;
        let valid = Tensor::cat(&[&Tensor::ones((b, 2 * c), tok_valid.dtype(), &Device::Cpu)?, &tok_valid], 1)?;
        let h = self.encoder.forward(&x, Some(&key_padding_bias(&valid)?))?;
        let stats = self.to_latent.forward(&h.narrow(1, 0, 2 * c)?)?;
        Ok(EncodedBatch { mu: stats.narrow(1, 0, c)?, logvar: stats.narrow(1, c, c)?.clamp(-12.0, 12.0)? })
    }

    /// Decodes `(B, C, D′)` latents to `(B, L, F)` normalized frames.
    pub fn decode_batch(&self, z: &Tensor, lens: &[usize]) -> Result<Tensor, VaeError> {
        let (b, c, _) = z.dims3()?;
        let p = self.config.patch;
        let frame_valid = MotionBatch::mask(lens, z.dtype())?;
        let l = frame_valid.dim(1)?;
        let n = l.div_ceil(p);
        let tok_lens: Vec<usize> = lens.iter().map(|&k| k.div_ceil(p)).collect();
        let valid = MotionBatch::mask(&tok_lens, z.dtype())?;
        let w = self.config.width;
        let zt = self.from_latent.forward(z)?.broadcast_add(&self.latent_pos)?;
        let q = self.positions(n)?.broadcast_add(&self.query)?.broadcast_as((b, n, w))?;
        let x = Tensor::cat(&[&zt, &q], 1)?;
        let valid = Tensor::cat(&[&Tensor::ones((b, c), z.dtype(), &Device::Cpu)?, &valid], 1)?;
        let h = self.decoder.forward(&x, Some(&key_padding_bias(&valid)?))?;
        let out = self.frame_out.forward(&h.narrow(1, c, n)?)?;
        let f = out.dim(2)? / p;
        Ok(out.reshape((b, n * p, f))?.narrow(1, 0, l)?)
    }

    /// Reparameterized draw `mu + noise_scale · sigma ⊙ ε`; scale 0 returns
    /// the mean.
    pub fn sample_latent(enc: &EncodedBatch, rng: &mut ChaCha8Rng, noise_scale: f64) -> candle_core::Result<Tensor> {
        let n = enc.mu.elem_count();
        let eps: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let eps = Tensor::from_vec(eps, enc.mu.shape(), &Device::Cpu)?.to_dtype(enc.mu.dtype())?;
        let std = (&enc.logvar * 0.5)?.exp()?;
        &enc.mu + ((std * eps)? * noise_scale)?
    }

    fn latent_from(&self, t: &Tensor) -> Result<LatentSeq, VaeError> {
        Ok(LatentSeq {
            level: self.config.level,
            tokens: self.config.tokens,
            dim: self.config.latent_dim,
            values: t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        })
    }

    pub fn encode(&self, m: &MotionSequence, rng: &mut ChaCha8Rng) -> Result<(Posterior, LatentSeq), VaeError> {
        self.encode_scaled(m, rng, 1.0)
    }

    /// [`MotionVae::encode`] with the posterior noise scaled; `0` forces the
    /// sample to equal the mean.
    pub fn encode_scaled(&self, m: &MotionSequence, rng: &mut ChaCha8Rng, noise_scale: f64) -> Result<(Posterior, LatentSeq), VaeError> {
        self.check_layout(m)?;
        let batch = MotionBatch::new(&[m], &self.normalizer, DType::F32)?;
        let enc = self.encode_batch(&batch)?;
        let z = Self::sample_latent(&enc, rng, noise_scale)?;
        let sigma = (&enc.logvar * 0.5)?.exp()?;
        let post = Posterior { mu: self.latent_from(&enc.mu)?, sigma: self.latent_from(&sigma)? };
        Ok((post, self.latent_from(&z)?))
    }

    pub fn latent_tensor(&self, z: &[&LatentSeq]) -> Result<Tensor, VaeError> {
        let c = self.config.tokens;
        let d = self.config.latent_dim;
        let mut values: Vec<f64> = Vec::with_capacity(z.len() * c * d);
        for l in z {
            if l.level != self.config.level || l.tokens != c || l.dim != d {
                return Err(VaeError::LevelMismatch { expected: self.config.level, found: l.level, tokens: l.tokens, want: c });
            }
            values.extend(&l.values);
        }
        Ok(Tensor::from_vec(values, (z.len(), c, d), &Device::Cpu)?.to_dtype(DType::F32)?)
    }

    /// Denormalizes `(B, L, F)` model output into motions of the given lengths.
    pub fn to_motions(&self, out: &Tensor, lens: &[usize]) -> Result<Vec<MotionSequence>, VaeError> {
        let rows: Vec<Vec<Vec<f64>>> = out.to_dtype(DType::F64)?.to_vec3()?;
        let layout = FeatureLayout::new(self.config.joints);
        rows.into_iter()
            .zip(lens)
            .map(|(r, &n)| {
                let flat: Vec<f64> = r.into_iter().take(n).flatten().collect();
                Ok(self.normalizer.denormalize(&flat, crate::motionrep::TOY_FPS, layout)?)
            })
            .collect()
    }

    pub fn decode(&self, z: &LatentSeq, frames: usize) -> Result<MotionSequence, VaeError> {
        if frames == 0 {
            return Err(VaeError::Config("frame count must be at least 1".into()));
        }
        let out = self.decode_batch(&self.latent_tensor(&[z])?, &[frames])?;
        Ok(self.to_motions(&out, &[frames])?.remove(0))
    }

    /// Loss on a batch with reparameterized sampling.
    pub fn loss_tensors(&self, batch: &MotionBatch, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor, Tensor), VaeError> {
        let enc = self.encode_batch(batch)?;
        let z = Self::sample_latent(&enc, rng, 1.0)?;
        let recon = self.decode_batch(&z, &batch.lens)?;
        Ok(vae_loss_terms(&recon, &batch.x, &batch.valid, &enc.mu, &enc.logvar, self.config.kl_weight)?)
    }

    pub fn loss(&self, motions: &[&MotionSequence], rng: &mut ChaCha8Rng) -> Result<VaeLoss, VaeError> {
        for m in motions {
            self.check_layout(m)?;
        }
        let batch = MotionBatch::new(motions, &self.normalizer, DType::F32)?;
        let (t, m, k) = self.loss_tensors(&batch, rng)?;
        Ok(VaeLoss { total: scalar_f64(&t)?, mse: scalar_f64(&m)?, kl: scalar_f64(&k)? })
    }

    /// Normalized-space mse of decoding the posterior mean, over `motions`.
    pub fn reconstruction_mse(&self, motions: &[&MotionSequence]) -> Result<f64, VaeError> {
        let mut sum = 0.0;
        let mut frames = 0.0;
        for chunk in motions.chunks(64) {
            let batch = MotionBatch::new(chunk, &self.normalizer, DType::F32)?;
            let enc = self.encode_batch(&batch)?;
            let recon = self.decode_batch(&enc.mu, &batch.lens)?;
            let n: f64 = batch.lens.iter().sum::<usize>() as f64;
            sum += scalar_f64(&masked_mse(&recon, &batch.x, &batch.valid)?)? * n;
            frames += n;
        }
        Ok(sum / frames.max(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Steps between loss-curve entries.
    pub log_every: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            steps: 4000,
            batch: 32,
            optim: OptimConfig { lr: 2e-3, steps: 4000, warmup: 50, ..OptimConfig::default() },
            seed: 0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, mean loss since the previous entry)`.
    pub curve: Vec<(usize, VaeLoss)>,
    pub first: VaeLoss,
    pub last: VaeLoss,
    pub seed: u64,
    /// Training stream position after the last step.
    pub rng: crate::nn::RngState,
}

/// Batches of similar length, reshuffled every epoch.
pub(crate) struct LengthBuckets {
    batches: Vec<Vec<usize>>,
    order: Vec<usize>,
    cursor: usize,
}

impl LengthBuckets {
    pub(crate) fn new(lens: &[usize], batch: usize) -> Self {
        let mut idx: Vec<usize> = (0..lens.len()).collect();
        idx.sort_by_key(|&i| (lens[i], i));
        let batches: Vec<Vec<usize>> = idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
        let order = (0..batches.len()).collect();
        LengthBuckets { batches, order, cursor: usize::MAX }
    }

    pub(crate) fn next(&mut self, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        &self.batches[self.order[self.cursor - 1]]
    }
}

fn mean_loss(acc: &[VaeLoss]) -> VaeLoss {
    let n = acc.len().max(1) as f64;
    VaeLoss {
        total: acc.iter().map(|l| l.total).sum::<f64>() / n,
        mse: acc.iter().map(|l| l.mse).sum::<f64>() / n,
        kl: acc.iter().map(|l| l.kl).sum::<f64>() / n,
    }
}

/// Trains one level's VAE on `motions`; deterministic in `train.seed`.
pub fn train_vae(
    motions: &[&MotionSequence],
    normalizer: Normalizer,
    config: VaeConfig,
    train: VaeTrainConfig,
) -> Result<(MotionVae, TrainReport), VaeError> {
    if motions.is_empty() {
        return Err(VaeError::EmptyDataset);
    }
    let vae = MotionVae::new(config, normalizer, train.seed)?;
    for m in motions {
        vae.check_layout(m)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x7661_65);
    let mut opt = Optim::new(vae.params.vars(), OptimConfig { steps: train.steps, ..train.optim })?;
    let lens: Vec<usize> = motions.iter().map(|m| m.len()).collect();
    let mut buckets = LengthBuckets::new(&lens, train.batch);
    let mut curve = Vec::new();
    let mut window = Vec::new();
    let mut first = None;
    for step in 0..train.steps {
        let idx = buckets.next(&mut rng).to_vec();
        let chunk: Vec<&MotionSequence> = idx.iter().map(|&i| motions[i]).collect();
        let batch = MotionBatch::new(&chunk, &vae.normalizer, DType::F32)?;
        let (total, mse, kl) = vae.loss_tensors(&batch, &mut rng)?;
        let l = VaeLoss { total: scalar_f64(&total)?, mse: scalar_f64(&mse)?, kl: scalar_f64(&kl)? };
        if !l.total.is_finite() {
            return Err(VaeError::Diverged { step, loss: l.total });
        }
        opt.step(&total)?;
        window.push(l);
        if window.len() >= train.log_every.max(1) || step + 1 == train.steps {
            let m = mean_loss(&window);
            first.get_or_insert(m);
            log::info!("vae {:?} step {} total {:.5} mse {:.5} kl {:.3}", config.level, step + 1, m.total, m.mse, m.kl);
            curve.push((step + 1, m));
            window.clear();
        }
    }
    let last = curve.last().map(|c| c.1).unwrap();
    let first = first.unwrap();
    Ok((vae, TrainReport { curve, first, last, seed: train.seed, rng: crate::nn::RngState::capture(&rng) }))
}
