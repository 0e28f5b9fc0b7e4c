use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Linear β schedule; arrays are indexed by `t - 1` for `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 0.012;

pub fn schedule_linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 2 || !(0.0 < beta_1 && beta_1 < beta_t && beta_t < 1.0) {
        return Err(DiffusionError::InvalidRange(format!(
            "need T >= 2 and 0 < beta_1 < beta_T < 1, got T={steps}, {beta_1}, {beta_t}"
        )));
    }
    let beta: Vec<f64> =
        (0..steps).map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64).collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { steps, beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn standard() -> Self {
        schedule_linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Evenly spaced descending timesteps `ceil(i·T/k)` for `i = k..1`.
    pub fn ddim_timesteps(&self, k: usize) -> Vec<usize> {
        let k = k.clamp(1, self.steps);
        (1..=k).rev().map(|i| (i * self.steps).div_ceil(k)).collect()
    }
}

/// `√ᾱ_t z0 + √(1−ᾱ_t) ε` on host vectors.
pub fn q_sample(s: &NoiseSchedule, z0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    let ab = s.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

/// Batched forward process: `z0`, `eps` are `(B, ...)`, one `t` per row.
pub fn q_sample_tensor(s: &NoiseSchedule, z0: &Tensor, ts: &[usize], eps: &Tensor) -> candle_core::Result<Tensor> {
    let b = z0.dim(0)?;
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, z0.rank() - 1));
    let a: Vec<f64> = ts.iter().map(|&t| s.alpha_bar_at(t).sqrt()).collect();
    let c: Vec<f64> = ts.iter().map(|&t| (1.0 - s.alpha_bar_at(t)).sqrt()).collect();
    let a = Tensor::from_vec(a, shape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
    let c = Tensor::from_vec(c, shape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
    z0.broadcast_mul(&a)? + eps.broadcast_mul(&c)?
}

/// `α′·cond + (1−α′)·uncond` on scalars.
pub fn cfg_combine_scalar(cond: f64, uncond: f64, scale: f64) -> f64 {
    scale * cond + (1.0 - scale) * uncond
}

/// Guided noise prediction; scales 1 and 0 return the corresponding input
/// unchanged.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, scale: f64) -> candle_core::Result<Tensor> {
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    (cond * scale)? + (uncond * (1.0 - scale))?
}

/// One DDIM update from `t` to `t_prev` (0 returns the predicted `z0`).
pub fn ddim_step(
    s: &NoiseSchedule,
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> candle_core::Result<Tensor> {
    assert!(t_prev < t, "DDIM steps must go backwards ({t} -> {t_prev})");
    let ab = s.alpha_bar_at(t);
    let ab_prev = s.alpha_bar_at(t_prev);
    let x0 = ((z_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (eps * (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt())?;
    let mean = ((x0 * ab_prev.sqrt())? + dir)?;
    if sigma == 0.0 {
        return Ok(mean);
    }
    let noise = gaussian_like(z_t, rng)?;
    mean + (noise * sigma)?
}

pub fn gaussian_like(t: &Tensor, rng: &mut ChaCha8Rng) -> candle_core::Result<Tensor> {
    let v: Vec<f64> = (0..t.elem_count()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, t.shape(), &Device::Cpu)?.to_dtype(t.dtype())
}

/// Runs DDIM over `timesteps` (descending) then to 0, calling `eps_fn(z, t)`.
pub fn ddim_loop(
    s: &NoiseSchedule,
    z_init: Tensor,
    timesteps: &[usize],
    eta: f64,
    rng: &mut ChaCha8Rng,
    mut eps_fn: impl FnMut(&Tensor, usize) -> candle_core::Result<Tensor>,
) -> candle_core::Result<Tensor> {
    let mut z = z_init;
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let eps = eps_fn(&z, t)?;
        z = ddim_step(s, &z, &eps, t, t_prev, eta, rng)?;
    }
    Ok(z)
}
