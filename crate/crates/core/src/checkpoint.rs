//! Self-describing parameter container: magic, format version, a JSON header
//! with the config snapshot, its hash, the RNG state and per-blob digests,
//! then the raw little-endian `f32` blob data.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::{DiffusionConfig, HierarchicalDenoiser};
use crate::metrics::{Evaluator, EvaluatorConfig};
use crate::motionrep::Normalizer;
use crate::motionvae::{MotionVae, VaeConfig};
use crate::nn::{ParamBlob, RngState};

pub const MAGIC: &[u8; 4] = b"STCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { expected: String, found: String },
    #[error("parameters do not fit the model: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: Value,
    config_hash: String,
    rng: Option<RngState>,
    extra: Value,
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub rng: Option<RngState>,
    /// Non-parameter state such as normalizers or vocabularies.
    pub extra: Value,
    pub blobs: Vec<ParamBlob>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash(config: &Value) -> String {
    sha_hex(config.to_string().as_bytes())
}

fn blob_bytes(b: &ParamBlob) -> Vec<u8> {
    b.values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            rng: self.rng.clone(),
            extra: self.extra.clone(),
            blobs: self
                .blobs
                .iter()
                .map(|b| BlobEntry { name: b.name.clone(), shape: b.shape.clone(), sha256: sha_hex(&blob_bytes(b)) })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in &self.blobs {
            out.extend_from_slice(&blob_bytes(b));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::Corrupt("truncated preamble".into()))?;
        if &magic != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v).map_err(|_| CheckpointError::Corrupt("truncated preamble".into()))?;
        let version = u32::from_le_bytes(v);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let mut n = [0u8; 8];
        r.read_exact(&mut n).map_err(|_| CheckpointError::Corrupt("truncated preamble".into()))?;
        let n = u64::from_le_bytes(n) as usize;
        if r.len() < n {
            return Err(CheckpointError::Corrupt("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&r[..n]).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        r = &r[n..];
        if header.format_version != version {
            return Err(CheckpointError::Corrupt("header version disagrees with preamble".into()));
        }
        if config_hash(&header.config) != header.config_hash {
            return Err(CheckpointError::Corrupt("config hash mismatch".into()));
        }
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for e in &header.blobs {
            let len = e.shape.iter().product::<usize>() * 4;
            if r.len() < len {
                return Err(CheckpointError::Corrupt(format!("blob {} is truncated", e.name)));
            }
            let (data, rest) = r.split_at(len);
            r = rest;
            if sha_hex(data) != e.sha256 {
                return Err(CheckpointError::Corrupt(format!("blob {} fails its digest", e.name)));
            }
            let values = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            blobs.push(ParamBlob { name: e.name.clone(), shape: e.shape.clone(), values });
        }
        if !r.is_empty() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Checkpoint { kind: header.kind, config: header.config, rng: header.rng, extra: header.extra, blobs })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind { expected: kind.into(), found: self.kind.clone() });
        }
        Ok(())
    }

    fn parse<T: serde::de::DeserializeOwned>(v: &Value, what: &str) -> Result<T, CheckpointError> {
        serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Corrupt(format!("{what}: {e}")))
    }
}

/// Writes atomically through a sibling temp file; returns the file digest.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<String, CheckpointError> {
    let bytes = ck.to_bytes();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(sha_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Digest of a checkpoint file on disk.
pub fn file_digest(path: &Path) -> Result<String, CheckpointError> {
    Ok(sha_hex(&std::fs::read(path)?))
}

pub const KIND_VAE: &str = "motion-vae";
pub const KIND_DENOISER: &str = "hierarchical-denoiser";
pub const KIND_EVALUATOR: &str = "evaluator";

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("serializable")
}

fn export(ps: &crate::nn::ParamStore) -> Result<Vec<ParamBlob>, CheckpointError> {
    ps.export().map_err(|e| CheckpointError::Incompatible(e.to_string()))
}

fn import(ps: &crate::nn::ParamStore, blobs: &[ParamBlob]) -> Result<(), CheckpointError> {
    ps.import(blobs).map_err(|e| CheckpointError::Incompatible(e.to_string()))
}

pub fn vae_checkpoint(vae: &MotionVae, rng: Option<RngState>) -> Result<Checkpoint, CheckpointError> {
    Ok(Checkpoint {
        kind: KIND_VAE.into(),
        config: to_value(&vae.config),
        rng,
        extra: serde_json::json!({ "normalizer": to_value(&vae.normalizer) }),
        blobs: export(&vae.params)?,
    })
}

pub fn restore_vae(ck: &Checkpoint) -> Result<MotionVae, CheckpointError> {
    ck.expect_kind(KIND_VAE)?;
    let config: VaeConfig = Checkpoint::parse(&ck.config, "config")?;
    let norm: Normalizer = Checkpoint::parse(&ck.extra["normalizer"], "normalizer")?;
    let vae = MotionVae::new(config, norm, 0).map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
    import(&vae.params, &ck.blobs)?;
    Ok(vae)
}

pub fn denoiser_checkpoint(m: &HierarchicalDenoiser, rng: Option<RngState>) -> Result<Checkpoint, CheckpointError> {
    Ok(Checkpoint {
        kind: KIND_DENOISER.into(),
        config: to_value(&m.config),
        rng,
        extra: serde_json::json!({ "latent_scale": m.latent_scale }),
        blobs: export(&m.params)?,
    })
}

pub fn restore_denoiser(ck: &Checkpoint) -> Result<HierarchicalDenoiser, CheckpointError> {
    ck.expect_kind(KIND_DENOISER)?;
    let config: DiffusionConfig = Checkpoint::parse(&ck.config, "config")?;
    let scale: [f64; 3] = Checkpoint::parse(&ck.extra["latent_scale"], "latent_scale")?;
    let m = HierarchicalDenoiser::new(config, scale, 0).map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
    import(&m.params, &ck.blobs)?;
    Ok(m)
}

pub fn evaluator_checkpoint(e: &Evaluator, rng: Option<RngState>) -> Result<Checkpoint, CheckpointError> {
    Ok(Checkpoint {
        kind: KIND_EVALUATOR.into(),
        config: to_value(&e.config),
        rng,
        extra: serde_json::json!({ "normalizer": to_value(&e.normalizer), "vocab": e.vocab }),
        blobs: export(&e.params)?,
    })
}

pub fn restore_evaluator(ck: &Checkpoint) -> Result<Evaluator, CheckpointError> {
    ck.expect_kind(KIND_EVALUATOR)?;
    let config: EvaluatorConfig = Checkpoint::parse(&ck.config, "config")?;
    let norm: Normalizer = Checkpoint::parse(&ck.extra["normalizer"], "normalizer")?;
    let vocab: Vec<String> = Checkpoint::parse(&ck.extra["vocab"], "vocab")?;
    Evaluator::restore(config, norm, vocab, &ck.blobs).map_err(|e| CheckpointError::Incompatible(e.to_string()))
}
