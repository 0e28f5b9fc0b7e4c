use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::toy::{describe_toy_motion, synthesize_toy_motion, ActionKind, Direction, PathShape, Speed, ToyAction, ToyMotionParams};
use super::{MotionError, MotionSequence};
use crate::semgraph::SemanticGraph;

/// Bumped whenever the toy generator's output changes.
pub const GENERATOR_VERSION: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub size: usize,
    pub frames_per_action: RangeInclusive<usize>,
    pub max_actions: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { size: 6000, frames_per_action: 12..=20, max_actions: 3, test_fraction: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    pub text: String,
    pub graph: SemanticGraph,
    pub params: ToyMotionParams,
    pub motion: MotionSequence,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: Split,
    pub text: String,
    pub frames: usize,
    /// sha256 of the little-endian frame values
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub config: DatasetConfig,
    pub normalizer: Normalizer,
    pub entries: Vec<ManifestEntry>,
    /// sha256 over all entry digests in order
    pub hash: String,
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn draw_action(rng: &mut ChaCha8Rng, frames: &RangeInclusive<usize>) -> ToyAction {
    let kind = ActionKind::ALL[rng.random_range(0..ActionKind::ALL.len())];
    let mut a = ToyAction::new(kind, rng.random_range(frames.clone()));
    let speed = if rng.random_bool(0.5) { Speed::Slow } else { Speed::Fast };
    match kind {
        ActionKind::Walk => {
            if rng.random_bool(0.7) {
                a.direction = Some(Direction::ALL[rng.random_range(0..4)]);
            }
            if rng.random_bool(0.5) {
                a.speed = Some(speed);
            }
            if rng.random_bool(0.3) {
                a.path = Some(if rng.random_bool(0.5) { PathShape::Straight } else { PathShape::Circle });
            }
        }
        ActionKind::Turn => {
            a.direction = Some(if rng.random_bool(0.5) { Direction::Left } else { Direction::Right });
            if rng.random_bool(0.5) {
                a.speed = Some(speed);
            }
        }
        ActionKind::Jump => {
            if rng.random_bool(0.5) {
                a.direction = Some(Direction::ALL[rng.random_range(0..4)]);
            }
            if rng.random_bool(0.5) {
                a.speed = Some(speed);
            }
        }
        ActionKind::Wave => {
            if rng.random_bool(0.5) {
                a.speed = Some(speed);
            }
        }
        ActionKind::Stop => {}
    }
    a
}

/// Draws random toy parameters from `rng`.
pub fn random_params(rng: &mut ChaCha8Rng, frames: &RangeInclusive<usize>, max_actions: usize) -> ToyMotionParams {
    let n = rng.random_range(1..=max_actions.clamp(1, 3));
    ToyMotionParams::new((0..n).map(|_| draw_action(rng, frames)).collect())
}

/// Generates the toy corpus; identical configs give identical datasets.
pub fn make_dataset(config: &DatasetConfig) -> Result<Dataset, MotionError> {
    if config.frames_per_action.is_empty() || *config.frames_per_action.start() == 0 {
        return Err(MotionError::Invalid("frames_per_action must be a non-empty positive range".into()));
    }
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(MotionError::Invalid(format!("test_fraction {} not in [0, 1)", config.test_fraction)));
    }
    let n_test = (config.size as f64 * config.test_fraction).round() as usize;
    let mut samples = Vec::with_capacity(config.size);
    for id in 0..config.size {
        let seed = sample_seed(config.seed, id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&mut rng, &config.frames_per_action, config.max_actions);
        let motion = synthesize_toy_motion(&params, seed ^ 0x5eed)?;
        let (text, graph) = describe_toy_motion(&params);
        let split = if id >= config.size - n_test { Split::Test } else { Split::Train };
        samples.push(Sample { id, split, text, graph, params, motion });
    }
    Ok(Dataset { config: config.clone(), samples })
}

fn motion_digest(m: &MotionSequence) -> String {
    let mut h = Sha256::new();
    for x in m.as_slice() {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn manifest(&self) -> Manifest {
        let entries: Vec<_> = self
            .samples
            .iter()
            .map(|s| ManifestEntry {
                id: s.id,
                split: s.split,
                text: s.text.clone(),
                frames: s.motion.len(),
                digest: motion_digest(&s.motion),
            })
            .collect();
        let mut h = Sha256::new();
        for e in &entries {
            h.update(e.digest.as_bytes());
            h.update(e.text.as_bytes());
        }
        Manifest {
            generator_version: GENERATOR_VERSION,
            config: self.config.clone(),
            normalizer: self.normalizer(),
            entries,
            hash: hex::encode(h.finalize()),
        }
    }

    /// Feature statistics over the training split.
    pub fn normalizer(&self) -> Normalizer {
        Normalizer::fit(self.split(Split::Train).map(|s| &s.motion))
    }
}

/// Per-feature z-normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Features with standard deviation below this are left unscaled.
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn fit<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>) -> Self {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in motions {
            if sum.is_empty() {
                sum = vec![0.0; m.width()];
                sq = vec![0.0; m.width()];
            }
            for f in m.frames() {
                for (i, &x) in f.iter().enumerate() {
                    sum[i] += x;
                    sq[i] += x * x;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n - m * m).max(0.0).sqrt();
                if s < Self::STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, m: &MotionSequence) -> Vec<f64> {
        let w = self.width();
        m.as_slice().iter().enumerate().map(|(i, x)| (x - self.mean[i % w]) / self.std[i % w]).collect()
    }

    /// Inverse of [`Normalizer::normalize`]; contacts are thresholded at 0.5.
    pub fn denormalize(&self, values: &[f64], fps: f64, layout: super::FeatureLayout) -> Result<MotionSequence, MotionError> {
        let w = self.width();
        if w != layout.width() {
            return Err(MotionError::LayoutMismatch { expected: layout.joints, found: (w.saturating_sub(8)) / 12 });
        }
        let contacts = layout.contacts();
        let frames = values
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let v = x * self.std[i % w] + self.mean[i % w];
                if contacts.contains(&(i % w)) {
                    if v >= 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect();
        MotionSequence::new(frames, fps, layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semgraph::{parse_description, validate};

    fn small() -> DatasetConfig {
        DatasetConfig { size: 60, ..DatasetConfig::default() }
    }

    #[test]
    fn deterministic_manifest() {
        let a = make_dataset(&small()).unwrap().manifest();
        let b = make_dataset(&small()).unwrap().manifest();
        assert_eq!(a, b);
        let c = make_dataset(&DatasetConfig { seed: 1, ..small() }).unwrap().manifest();
        assert_ne!(a.hash, c.hash);
    }

    #[test]
    fn samples_are_consistent() {
        let d = make_dataset(&small()).unwrap();
        assert_eq!(d.split(Split::Test).count(), 12);
        for s in &d.samples {
            assert_eq!(validate(&s.graph), vec![]);
            assert_eq!(parse_description(&s.text).unwrap(), s.graph, "{}", s.text);
            assert_eq!(s.motion.len(), s.params.total_frames());
            let fpa = &d.config.frames_per_action;
            assert!(s.params.actions.iter().all(|a| fpa.contains(&a.frames)));
        }
    }

    #[test]
    fn every_action_is_common() {
        let d = make_dataset(&DatasetConfig { size: 400, seed: 7, ..DatasetConfig::default() }).unwrap();
        for k in ActionKind::ALL {
            let n = d.samples.iter().filter(|s| s.params.actions.iter().any(|a| a.kind == k)).count();
            assert!(n as f64 >= 0.1 * d.samples.len() as f64, "{k:?} in {n} samples");
        }
    }

    #[test]
    fn normalizer_round_trip() {
        let d = make_dataset(&small()).unwrap();
        let n = d.normalizer();
        let train: Vec<f64> = d.split(Split::Train).flat_map(|s| n.normalize(&s.motion)).collect();
        let w = n.width();
        let rows = train.len() / w;
        for i in 0..w {
            let col: Vec<f64> = (0..rows).map(|r| train[r * w + i]).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            assert!(mean.abs() < 1e-9, "feature {i} mean {mean}");
        }
        let s = &d.samples[0];
        let back = n.denormalize(&n.normalize(&s.motion), s.motion.fps, s.motion.layout).unwrap();
        for (a, b) in back.as_slice().iter().zip(s.motion.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
