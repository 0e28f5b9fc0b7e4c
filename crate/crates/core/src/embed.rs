//! Sentence encoders and initial node embeddings.
//!
//! The motion node takes the sentence summary slot, an action node takes the
//! vector at its verb token, and a specific node takes the mean over its span.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::semgraph::{tokenize, Level, NodeId, SemanticGraph, Span, MASK_TOKEN};

/// Embedding width used at desk scale.
pub const DEFAULT_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("text encoder {name:?} is not available; known encoders: {}", known.join(", "))]
    EncoderUnavailable { name: String, known: Vec<String> },
    #[error("node {node} span [{}, {}) is outside the {tokens} encoded tokens", span.start, span.end)]
    SpanOutOfRange { node: NodeId, span: Span, tokens: usize },
    #[error("text has no tokens")]
    EmptyText,
    #[error("encoder width {found} does not match expected {expected}")]
    DimMismatch { expected: usize, found: usize },
}

/// Per-token vectors of one sentence; row 0 is the summary slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    /// Vector of the mask sentinel under the same encoder.
    pub mask: Vec<f64>,
    pub dim: usize,
}

impl TextEncoding {
    pub fn summary(&self) -> &[f64] {
        &self.vectors[0]
    }

    /// Vector of token `i` (0-based into `tokens`).
    pub fn token(&self, i: usize) -> &[f64] {
        &self.vectors[i + 1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderHandle {
    pub name: String,
    pub dim: usize,
    pub deterministic: bool,
}

/// Plugin contract for sentence encoders.
pub trait TextEncoder: Send + Sync {
    fn handle(&self) -> EncoderHandle;

    fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text)
    }

    /// One vector per token; the summary slot is added by [`encode_tokens`].
    fn token_vectors(&self, tokens: &[String]) -> Vec<Vec<f64>>;

    fn summarize(&self, token_vectors: &[Vec<f64>]) -> Vec<f64> {
        mean_rows(token_vectors.iter().map(Vec::as_slice), self.handle().dim)
    }
}

/// Incremental mean; exact when all rows are equal.
fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for (k, r) in rows.enumerate() {
        let k = (k + 1) as f64;
        for (a, x) in acc.iter_mut().zip(r) {
            *a += (x - *a) / k;
        }
    }
    acc
}

pub fn encode_tokens(enc: &dyn TextEncoder, tokens: Vec<String>) -> Result<TextEncoding, EmbedError> {
    if tokens.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let dim = enc.handle().dim;
    let rows = enc.token_vectors(&tokens);
    let mut vectors = Vec::with_capacity(rows.len() + 1);
    vectors.push(enc.summarize(&rows));
    vectors.extend(rows);
    let mask = enc.token_vectors(&[MASK_TOKEN.to_string()]).remove(0);
    Ok(TextEncoding { tokens, vectors, mask, dim })
}

pub fn encode_sentence(enc: &dyn TextEncoder, text: &str) -> Result<TextEncoding, EmbedError> {
    encode_tokens(enc, enc.tokenize(text))
}

/// Encodes the graph's sentence with masked spans replaced by the sentinel.
pub fn encode_graph(enc: &dyn TextEncoder, g: &SemanticGraph) -> Result<TextEncoding, EmbedError> {
    encode_tokens(enc, g.encoder_tokens())
}

/// Deterministic hashed word and character-trigram embedder.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    dim: usize,
    salt: u64,
}

impl HashEncoder {
    pub const NAME: &'static str = "hash-ngram";

    pub fn new(dim: usize) -> Self {
        HashEncoder { dim, salt: 0 }
    }

    pub fn with_salt(dim: usize, salt: u64) -> Self {
        HashEncoder { dim, salt }
    }

    fn gram_vector(&self, gram: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.salt.to_le_bytes());
        h.update(gram.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn vector(&self, token: &str) -> Vec<f64> {
        if token == MASK_TOKEN {
            return self.gram_vector("\u{0}mask");
        }
        let mut grams = vec![format!("w:{token}")];
        let chars: Vec<char> = format!("<{token}>").chars().collect();
        grams.extend(chars.windows(3).map(|w| format!("c:{}", w.iter().collect::<String>())));
        // the whole-word gram carries as much weight as all trigrams together
        let n_tri = (grams.len() - 1).max(1) as f64;
        let mut v = self.gram_vector(&grams[0]);
        for g in &grams[1..] {
            for (a, b) in v.iter_mut().zip(self.gram_vector(g)) {
                *a += b / n_tri;
            }
        }
        let s = std::f64::consts::FRAC_1_SQRT_2;
        v.iter_mut().for_each(|a| *a *= s);
        v
    }
}

impl TextEncoder for HashEncoder {
    fn handle(&self) -> EncoderHandle {
        EncoderHandle { name: Self::NAME.into(), dim: self.dim, deterministic: true }
    }

    fn token_vectors(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        tokens.iter().map(|t| self.vector(t)).collect()
    }
}

/// Learned embedding table. Unknown tokens map to a shared `[UNK]` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEncoder {
    pub vocab: Vec<String>,
    /// Row-major `vocab.len() × dim`.
    pub weights: Vec<f64>,
    pub dim: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TableEncoder {
    pub const NAME: &'static str = "learned-table";
    pub const UNK: &'static str = "[UNK]";

    /// Vocabulary from `sentences`, plus `[UNK]` and the mask sentinel.
    pub fn build_vocab<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut vocab: Vec<String> = vec![Self::UNK.into(), MASK_TOKEN.into()];
        let mut seen: std::collections::HashSet<String> = vocab.iter().cloned().collect();
        for s in sentences {
            for t in tokenize(s) {
                if seen.insert(t.clone()) {
                    vocab.push(t);
                }
            }
        }
        vocab
    }

    pub fn new(vocab: Vec<String>, weights: Vec<f64>, dim: usize) -> Result<Self, EmbedError> {
        if weights.len() != vocab.len() * dim {
            return Err(EmbedError::DimMismatch { expected: vocab.len() * dim, found: weights.len() });
        }
        let mut t = TableEncoder { vocab, weights, dim, index: HashMap::new() };
        t.reindex();
        Ok(t)
    }

    /// Rebuilds the lookup map, e.g. after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

impl TextEncoder for TableEncoder {
    fn handle(&self) -> EncoderHandle {
        EncoderHandle { name: Self::NAME.into(), dim: self.dim, deterministic: true }
    }

    fn token_vectors(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        tokens
            .iter()
            .map(|t| {
                let i = self.id(t);
                self.weights[i * self.dim..(i + 1) * self.dim].to_vec()
            })
            .collect()
    }
}

/// Encoders discoverable by name.
#[derive(Clone, Default)]
pub struct EncoderRegistry {
    encoders: HashMap<String, Arc<dyn TextEncoder>>,
}

impl EncoderRegistry {
    /// Registry holding the hashed encoder at width `dim`.
    pub fn with_defaults(dim: usize) -> Self {
        let mut r = EncoderRegistry::default();
        r.register(Arc::new(HashEncoder::new(dim)));
        r
    }

    pub fn register(&mut self, enc: Arc<dyn TextEncoder>) {
        self.encoders.insert(enc.handle().name, enc);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn TextEncoder>, EmbedError> {
        self.encoders.get(name).cloned().ok_or_else(|| {
            let mut known: Vec<String> = self.encoders.keys().cloned().collect();
            known.sort();
            EmbedError::EncoderUnavailable { name: name.into(), known }
        })
    }
}

/// Initial node vectors per level, with index maps from node id to row.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub motion: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub specifics: Vec<Vec<f64>>,
    pub index: HashMap<NodeId, (Level, usize)>,
    pub dim: usize,
}

impl NodeEmbeddings {
    pub fn get(&self, id: &NodeId) -> Option<&[f64]> {
        let (level, row) = *self.index.get(id)?;
        Some(match level {
            Level::Motion => &self.motion,
            Level::Action => &self.actions[row],
            Level::Specific => &self.specifics[row],
        })
    }

    /// Rows in the order of `g.nodes`.
    pub fn in_graph_order(&self, g: &SemanticGraph) -> Vec<Vec<f64>> {
        g.nodes.iter().map(|n| self.get(&n.id).expect("embeddings aligned with graph").to_vec()).collect()
    }

    /// Inverse of [`NodeEmbeddings::in_graph_order`].
    pub fn from_graph_order(g: &SemanticGraph, rows: Vec<Vec<f64>>) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let mut out = NodeEmbeddings { motion: vec![0.0; dim], actions: vec![], specifics: vec![], index: HashMap::new(), dim };
        for (n, r) in g.nodes.iter().zip(rows) {
            let row = match n.level {
                Level::Motion => {
                    out.motion = r;
                    0
                }
                Level::Action => {
                    out.actions.push(r);
                    out.actions.len() - 1
                }
                Level::Specific => {
                    out.specifics.push(r);
                    out.specifics.len() - 1
                }
            };
            out.index.insert(n.id.clone(), (n.level, row));
        }
        out
    }

    pub fn level(&self, level: Level) -> Vec<&[f64]> {
        match level {
            Level::Motion => vec![&self.motion],
            Level::Action => self.actions.iter().map(Vec::as_slice).collect(),
            Level::Specific => self.specifics.iter().map(Vec::as_slice).collect(),
        }
    }
}

pub fn node_representations(g: &SemanticGraph, enc: &TextEncoding) -> Result<NodeEmbeddings, EmbedError> {
    let n_tok = enc.tokens.len();
    let rows = g
        .nodes
        .iter()
        .map(|n| {
            if n.span.is_empty() || n.span.end > n_tok {
                return Err(EmbedError::SpanOutOfRange { node: n.id.clone(), span: n.span, tokens: n_tok });
            }
            Ok(match n.level {
                Level::Motion => enc.summary().to_vec(),
                _ if n.masked => enc.mask.clone(),
                Level::Action => enc.token(n.span.start).to_vec(),
                Level::Specific => mean_rows((n.span.start..n.span.end).map(|i| enc.token(i)), enc.dim),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut e = NodeEmbeddings::from_graph_order(g, rows);
    e.dim = enc.dim;
    Ok(e)
}

/// Encodes and embeds a graph in one step.
pub fn embed_graph(enc: &dyn TextEncoder, g: &SemanticGraph) -> Result<NodeEmbeddings, EmbedError> {
    node_representations(g, &encode_graph(enc, g)?)
}
