use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureSet, MetricError, Source};
use crate::embed::TableEncoder;
use crate::motionrep::{FeatureLayout, MotionSequence, Normalizer};
use crate::motionvae::{patchify, MotionBatch};
use crate::nn::{key_padding_bias, scalar_f64, sinusoid_table, LayerNorm, Linear, Optim, OptimConfig, ParamStore, ParamBlob, TransformerLayer};
use crate::semgraph::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    /// Shared embedding width.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub patch: usize,
    pub joints: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig {
            dim: 32,
            layers: 2,
            heads: 2,
            ff: 64,
            patch: 4,
            joints: crate::motionrep::TOY_JOINTS,
            steps: 1500,
            batch: 64,
            lr: 2e-3,
            temperature: 0.1,
            seed: 0,
        }
    }
}

struct Tower {
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
    out: Linear,
}

impl Tower {
    fn new(ps: &mut ParamStore, name: &str, c: &EvaluatorConfig) -> candle_core::Result<Self> {
        let layers = (0..c.layers)
            .map(|i| TransformerLayer::new(ps, &format!("{name}.layer{i}"), c.dim, c.heads, c.ff))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tower { layers, norm: LayerNorm::new(ps, &format!("{name}.norm"), c.dim)?, out: Linear::new(ps, &format!("{name}.out"), c.dim, c.dim)? })
    }

    /// Masked mean pool of the stack output, projected and unit-normalized.
    fn forward(&self, x: &Tensor, valid: &Tensor) -> candle_core::Result<Tensor> {
        let bias = key_padding_bias(valid)?;
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h, Some(&bias))?;
        }
        let h = self.norm.forward(&h)?;
        let w = valid.unsqueeze(2)?;
        let pooled = h.broadcast_mul(&w)?.sum(1)?.broadcast_div(&w.sum(1)?.clamp(1.0, f64::MAX)?)?;
        let y = self.out.forward(&pooled)?;
        let norm = (y.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        y.broadcast_div(&norm)
    }
}

/// Contrastive text and motion encoders mapping into a shared unit sphere.
pub struct Evaluator {
    pub config: EvaluatorConfig,
    pub normalizer: Normalizer,
    pub vocab: Vec<String>,
    pub params: ParamStore,
    index: HashMap<String, usize>,
    table: Tensor,
    text: Tower,
    motion_in: Linear,
    motion: Tower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorReport {
    /// `(step, mean loss over the preceding window)`.
    pub curve: Vec<(usize, f64)>,
    pub rng: crate::nn::RngState,
}

impl Evaluator {
    pub fn new(config: EvaluatorConfig, normalizer: Normalizer, vocab: Vec<String>) -> Result<Self, MetricError> {
        let mut ps = ParamStore::new(config.seed, DType::F32);
        let f = FeatureLayout::new(config.joints).width();
        let table = ps.uniform("eval.table", &[vocab.len(), config.dim], 1.0)?;
        let text = Tower::new(&mut ps, "eval.text", &config)?;
        let motion_in = Linear::new(&mut ps, "eval.motion_in", f * config.patch, config.dim)?;
        let motion = Tower::new(&mut ps, "eval.motion", &config)?;
        let index = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Evaluator { config, normalizer, vocab, params: ps, index, table, text, motion_in, motion })
    }

    /// Rebuilds an evaluator from exported parameters.
    pub fn restore(config: EvaluatorConfig, normalizer: Normalizer, vocab: Vec<String>, blobs: &[ParamBlob]) -> Result<Self, MetricError> {
        let e = Self::new(config, normalizer, vocab)?;
        e.params.import(blobs)?;
        Ok(e)
    }

    fn positions(&self, n: usize) -> candle_core::Result<Tensor> {
        Tensor::from_vec(sinusoid_table(n, self.config.dim), (1, n, self.config.dim), &Device::Cpu)
    }

    fn text_forward(&self, texts: &[&str]) -> candle_core::Result<Tensor> {
        let ids: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| tokenize(t).iter().map(|w| self.index.get(w).copied().unwrap_or(0) as u32).collect())
            .collect();
        let n = ids.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let b = texts.len();
        let mut flat = Vec::with_capacity(b * n);
        let mut valid = Vec::with_capacity(b * n);
        for row in &ids {
            for j in 0..n {
                flat.push(row.get(j).copied().unwrap_or(0));
                valid.push(if j < row.len() { 1f32 } else { 0.0 });
            }
        }
        let idx = Tensor::from_vec(flat, b * n, &Device::Cpu)?;
        let x = self.table.index_select(&idx, 0)?.reshape((b, n, self.config.dim))?.broadcast_add(&self.positions(n)?)?;
        let valid = Tensor::from_vec(valid, (b, n), &Device::Cpu)?;
        self.text.forward(&x, &valid)
    }

    fn motion_forward(&self, motions: &[&MotionSequence]) -> Result<Tensor, MetricError> {
        let batch = MotionBatch::new(motions, &self.normalizer, DType::F32)
            .map_err(|e| MetricError::ShapeMismatch(e.to_string()))?;
        let (tokens, valid) = patchify(&batch.x, &batch.valid, self.config.patch)?;
        let n = tokens.dim(1)?;
        let x = self.motion_in.forward(&tokens)?.broadcast_add(&self.positions(n)?)?;
        Ok(self.motion.forward(&x, &valid)?)
    }

    pub fn motion_features(&self, motions: &[&MotionSequence]) -> Result<FeatureSet, MetricError> {
        let mut rows = Vec::with_capacity(motions.len());
        for chunk in motions.chunks(128) {
            let f: Vec<Vec<f32>> = self.motion_forward(chunk)?.to_vec2()?;
            rows.extend(f.into_iter().map(|r| r.into_iter().map(f64::from).collect::<Vec<f64>>()));
        }
        FeatureSet::new(&rows, Source::Generated)
    }

    pub fn text_features(&self, texts: &[&str]) -> Result<FeatureSet, MetricError> {
        let mut rows = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(128) {
            let f: Vec<Vec<f32>> = self.text_forward(chunk)?.to_vec2()?;
            rows.extend(f.into_iter().map(|r| r.into_iter().map(f64::from).collect::<Vec<f64>>()));
        }
        FeatureSet::new(&rows, Source::Text)
    }

    /// The learned token table as a pluggable text encoder.
    pub fn text_encoder(&self) -> Result<TableEncoder, MetricError> {
        let w: Vec<f64> = self.table.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        TableEncoder::new(self.vocab.clone(), w, self.config.dim).map_err(|e| MetricError::ShapeMismatch(e.to_string()))
    }

    /// Symmetric contrastive loss; identical captions in a batch count as
    /// positives for each other.
    fn loss(&self, motions: &[&MotionSequence], texts: &[&str]) -> Result<Tensor, MetricError> {
        let m = self.motion_forward(motions)?;
        let t = self.text_forward(texts)?;
        let b = texts.len();
        let logits = (m.matmul(&t.t()?)? / self.config.temperature)?;
        let mut target = vec![0f32; b * b];
        for i in 0..b {
            let same: Vec<usize> = (0..b).filter(|&j| texts[j] == texts[i]).collect();
            for &j in &same {
                target[i * b + j] = 1.0 / same.len() as f32;
            }
        }
        let target = Tensor::from_vec(target, (b, b), &Device::Cpu)?;
        let lm = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let lt = candle_nn::ops::log_softmax(&logits.t()?, D::Minus1)?;
        let a = (lm * &target)?.sum_all()?.neg()?;
        let c = (lt * &target)?.sum_all()?.neg()?;
        Ok(((a + c)? / (2.0 * b as f64))?)
    }
}

/// Trains the evaluator on aligned `(motion, text)` pairs.
pub fn train_evaluator(
    motions: &[&MotionSequence],
    texts: &[&str],
    normalizer: Normalizer,
    config: EvaluatorConfig,
) -> Result<(Evaluator, EvaluatorReport), MetricError> {
    if motions.len() != texts.len() || motions.len() < 2 {
        return Err(MetricError::InsufficientSamples { need: 2, got: motions.len().min(texts.len()) });
    }
    let vocab = TableEncoder::build_vocab(texts.iter().copied());
    let ev = Evaluator::new(config, normalizer, vocab)?;
    let mut opt = Optim::new(
        ev.params.vars(),
        OptimConfig { lr: config.lr, steps: config.steps, warmup: 50, ..OptimConfig::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6576_616c);
    let mut order: Vec<usize> = (0..motions.len()).collect();
    let bsz = config.batch.clamp(2, motions.len());
    let mut cursor = order.len();
    let mut curve = Vec::new();
    let mut window = Vec::new();
    for step in 0..config.steps {
        if cursor + bsz > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bsz];
        cursor += bsz;
        let ms: Vec<&MotionSequence> = idx.iter().map(|&i| motions[i]).collect();
        let ts: Vec<&str> = idx.iter().map(|&i| texts[i]).collect();
        let loss = ev.loss(&ms, &ts)?;
        let l = scalar_f64(&loss)?;
        if !l.is_finite() {
            return Err(MetricError::Diverged { step, loss: l });
        }
        opt.step(&loss)?;
        window.push(l);
        if window.len() == 100 || step + 1 == config.steps {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            log::info!("evaluator step {} loss {:.4}", step + 1, mean);
            curve.push((step + 1, mean));
            window.clear();
        }
    }
    Ok((ev, EvaluatorReport { curve, rng: crate::nn::RngState::capture(&rng) }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::r_precision;
    use crate::motionrep::{make_dataset, DatasetConfig, Split};

    #[test]
    fn features_are_unit_norm_and_deterministic() {
        let ds = make_dataset(&DatasetConfig { size: 40, ..DatasetConfig::default() }).unwrap();
        let ms: Vec<&MotionSequence> = ds.samples.iter().map(|s| &s.motion).collect();
        let ts: Vec<&str> = ds.samples.iter().map(|s| s.text.as_str()).collect();
        let vocab = TableEncoder::build_vocab(ts.iter().copied());
        let a = Evaluator::new(EvaluatorConfig::default(), ds.normalizer(), vocab.clone()).unwrap();
        let b = Evaluator::new(EvaluatorConfig::default(), ds.normalizer(), vocab).unwrap();
        let fa = a.motion_features(&ms).unwrap();
        assert_eq!(fa, b.motion_features(&ms).unwrap());
        for i in 0..fa.len() {
            let n: f64 = fa.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-4);
        }
        let enc = a.text_encoder().unwrap();
        assert_eq!(enc.vocab.len() * enc.dim, enc.weights.len());
    }

    #[test]
    fn short_training_beats_chance() {
        let ds = make_dataset(&DatasetConfig { size: 300, ..DatasetConfig::default() }).unwrap();
        let pick = |s: Split| -> (Vec<&MotionSequence>, Vec<&str>) {
            ds.split(s).map(|x| (&x.motion, x.text.as_str())).unzip()
        };
        let (ms, ts) = pick(Split::Train);
        let cfg = EvaluatorConfig { steps: 150, ..EvaluatorConfig::default() };
        let (ev, rep) = train_evaluator(&ms, &ts, ds.normalizer(), cfg).unwrap();
        assert!(rep.curve.last().unwrap().1 < rep.curve[0].1);
        let (tm, tt) = pick(Split::Test);
        let r = r_precision(&ev.motion_features(&tm).unwrap(), &ev.text_features(&tt).unwrap(), 32, 5, 0).unwrap();
        assert!(r.top[2] > 3.0 / 32.0, "{:?}", r.top);
    }
}
