//! Frozen joint image-text embedding backends.
//!
//! A backend maps images and token sequences into one vector space where
//! cosine similarity measures semantic match. Two implementations are
//! provided: a deterministic toy backend whose optima are known in closed
//! form (images are token multisets, text is a bag-of-tokens sum), and a
//! read-only adapter over a file of precomputed embeddings for real encoders
//! that run out of process. Backends are immutable after construction and
//! never trained.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::rng::{substream, SeededRng};
use crate::tokens::TokenSequence;

/// Magic bytes opening an embedding cache file.
pub const CACHE_MAGIC: &[u8; 8] = b"SSLCAP01";

/// Text-tokenizer vocabulary assumed for cache-only adapters (the BPE vocab
/// of the encoders the caches are produced with).
pub const DEFAULT_CACHE_VOCAB: usize = 49_408;

/// A vector in the joint embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateVector(
                "embedding contains non-finite entries".into(),
            ));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// What a backend offers: its embedding dimension, the text vocabulary it
/// understands, and whether soft (differentiable) text encoding is available.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub dim: usize,
    pub vocabulary_size: usize,
    pub differentiable_text: bool,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::Parameter("backend dim must be >= 1".into()));
        }
        if self.vocabulary_size < 2 {
            return Err(Error::Parameter(
                "backend vocabulary_size must be >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Construction recipe for the toy backend. The token embedding table is a
/// pure function of (seed, dim, vocabulary_size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyBackendSpec {
    pub seed: u64,
    pub dim: usize,
    pub vocabulary_size: usize,
    pub noise_scale: f64,
}

impl Default for ToyBackendSpec {
    fn default() -> Self {
        ToyBackendSpec {
            seed: 0,
            dim: 32,
            vocabulary_size: 16,
            noise_scale: 0.0,
        }
    }
}

/// How an image is identified to a backend.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    /// Key into a precomputed embedding cache.
    Id(String),
    /// Toy image: a token multiset.
    Bag(Vec<u32>),
}

impl std::fmt::Display for ImageRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ImageRef::Id(id) => write!(f, "{id}"),
            ImageRef::Bag(bag) => write!(f, "bag{bag:?}"),
        }
    }
}

/// Uniform interface to a frozen joint embedding model.
///
/// Every encode operation is a pure function of (backend construction,
/// input); implementations are immutable after construction and safe to
/// share across threads.
pub trait JointEmbeddingBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Frozen visual embedding for an image.
    fn encode_image(&self, image: &ImageRef) -> Result<EmbeddingVector>;

    /// Frozen textual embedding for a hard token sequence.
    fn encode_text(&self, tokens: &TokenSequence) -> Result<EmbeddingVector>;

    /// Differentiable text encoding: each hard token lookup is replaced by
    /// the probability-weighted mixture of embedding rows, then the backend's
    /// usual aggregation and normalization apply. Gradients flow from the
    /// output tensor back into the soft rows.
    fn encode_text_soft(&self, _graph: &Graph, _rows: &[Tensor]) -> Result<Tensor> {
        Err(Error::Capability {
            backend: self.descriptor().name.clone(),
            capability: "differentiable text encoding".into(),
        })
    }
}

/// Cosine similarity in f64, clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "cosine_similarity dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector(
            "cosine_similarity on zero-norm vector".into(),
        ));
    }
    let dot: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Toy backend
// ---------------------------------------------------------------------------

/// Deterministic bag-of-tokens joint embedding over a seeded Gaussian table.
///
/// The table is drawn row-major from the ChaCha20 substream labeled
/// `"toy-backend-table"` of the configured seed (standard normals via Box-Muller,
/// see [`crate::rng`]), then rounded to f32. An image `Bag(b)` embeds as the
/// L2-normalized sum of the rows of `b` (sorted before summing, so the
/// multiset alone determines the result) plus optional Gaussian noise of
/// scale `noise_scale` drawn from a per-bag substream. Text embeds the same
/// way without noise.
pub struct ToyBackend {
    spec: ToyBackendSpec,
    descriptor: BackendDescriptor,
    table: Vec<f32>,
}

impl ToyBackend {
    pub fn new(spec: ToyBackendSpec) -> Result<Self> {
        let descriptor = BackendDescriptor {
            name: format!("toy-{}", spec.seed),
            dim: spec.dim,
            vocabulary_size: spec.vocabulary_size,
            differentiable_text: true,
        };
        descriptor.validate()?;
        if spec.noise_scale < 0.0 {
            return Err(Error::Parameter("noise_scale must be nonnegative".into()));
        }
        let mut rng = substream(spec.seed, "toy-backend-table");
        let table = (0..spec.vocabulary_size * spec.dim)
            .map(|_| rng.normal() as f32)
            .collect();
        Ok(ToyBackend {
            spec,
            descriptor,
            table,
        })
    }

    pub fn spec(&self) -> &ToyBackendSpec {
        &self.spec
    }

    /// Embedding-table row for one token.
    pub fn token_row(&self, token: u32) -> Result<&[f32]> {
        if token as usize >= self.spec.vocabulary_size {
            return Err(Error::Vocabulary {
                token,
                vocab: self.spec.vocabulary_size,
            });
        }
        let d = self.spec.dim;
        Ok(&self.table[token as usize * d..(token as usize + 1) * d])
    }

    fn sum_rows(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut sorted = tokens.to_vec();
        sorted.sort_unstable();
        let mut acc = vec![0.0f64; self.spec.dim];
        for &t in &sorted {
            let row = self.token_row(t)?;
            for (a, &r) in acc.iter_mut().zip(row) {
                *a += r as f64;
            }
        }
        Ok(acc)
    }

    fn normalize_to_f32(acc: &[f64]) -> Result<EmbeddingVector> {
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateVector(
                "toy embedding summed to the zero vector".into(),
            ));
        }
        EmbeddingVector::new(acc.iter().map(|v| (v / norm) as f32).collect())
    }

    fn bag_noise_stream(&self, bag: &[u32]) -> SeededRng {
        let mut sorted = bag.to_vec();
        sorted.sort_unstable();
        let mut h: u64 = 0xcbf29ce484222325;
        for t in sorted {
            for b in t.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        substream(self.spec.seed ^ h, "toy-image-noise")
    }
}

impl JointEmbeddingBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode_image(&self, image: &ImageRef) -> Result<EmbeddingVector> {
        match image {
            ImageRef::Id(id) => Err(Error::MissingEmbedding(id.clone())),
            ImageRef::Bag(bag) => {
                if bag.is_empty() {
                    return Err(Error::EmptyCaption("toy image bag is empty".into()));
                }
                let mut acc = self.sum_rows(bag)?;
                if self.spec.noise_scale > 0.0 {
                    let mut noise = self.bag_noise_stream(bag);
                    for a in acc.iter_mut() {
                        *a += noise.normal() * self.spec.noise_scale;
                    }
                }
                Self::normalize_to_f32(&acc)
            }
        }
    }

    fn encode_text(&self, tokens: &TokenSequence) -> Result<EmbeddingVector> {
        if tokens.is_empty() {
            return Err(Error::EmptyCaption("encode_text on empty sequence".into()));
        }
        let acc = self.sum_rows(tokens.ids())?;
        Self::normalize_to_f32(&acc)
    }

    fn encode_text_soft(&self, graph: &Graph, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::EmptyCaption(
                "encode_text_soft on empty sequence".into(),
            ));
        }
        let (v, d) = (self.spec.vocabulary_size, self.spec.dim);
        let table64: Vec<f64> = self.table.iter().map(|&x| x as f64).collect();
        let table = graph.tensor(v, d, table64);
        let mut acc: Option<Tensor> = None;
        for row in rows {
            if row.rows() != 1 || row.cols() != v {
                return Err(Error::Shape(format!(
                    "soft row must be 1x{v}, got {}x{}",
                    row.rows(),
                    row.cols()
                )));
            }
            let sum: f64 = row.value().iter().sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::NotNormalized(format!(
                    "soft token row sums to {sum}"
                )));
            }
            let mixed = row.matmul(&table);
            acc = Some(match acc {
                Some(prev) => prev.add(&mixed),
                None => mixed,
            });
        }
        acc.expect("rows nonempty").normalize()
    }
}

// ---------------------------------------------------------------------------
// Embedding cache file
// ---------------------------------------------------------------------------

/// Write an embedding cache: magic, u32 dim, u32 count, then per record
/// [u16 id length, UTF-8 id bytes, dim x f32], all little-endian.
pub fn write_embedding_cache(
    path: &Path,
    dim: usize,
    entries: &[(String, Vec<f32>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (id, values) in entries {
        if values.len() != dim {
            return Err(Error::Shape(format!(
                "cache entry `{id}` has dim {} but file dim is {dim}",
                values.len()
            )));
        }
        let id_bytes = id.as_bytes();
        if id_bytes.len() > u16::MAX as usize {
            return Err(Error::Parameter(format!("image id `{id}` too long")));
        }
        w.write_all(&(id_bytes.len() as u16).to_le_bytes())?;
        w.write_all(id_bytes)?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a cache file back as (dim, records in file order).
pub fn read_embedding_cache(path: &Path) -> Result<(usize, Vec<(String, Vec<f32>)>)> {
    let display = path.display().to_string();
    let format_err = |reason: &str| Error::Format {
        path: display.clone(),
        reason: reason.into(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| format_err("file shorter than the magic header"))?;
    if &magic != CACHE_MAGIC {
        return Err(format_err("wrong magic bytes"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| format_err("truncated before dim field"))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)
        .map_err(|_| format_err("truncated before count field"))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)
            .map_err(|_| format_err(&format!("truncated at record {i} id length")))?;
        let id_len = u16::from_le_bytes(u16buf) as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes)
            .map_err(|_| format_err(&format!("truncated at record {i} id")))?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| format_err(&format!("record {i} id is not UTF-8")))?;
        let mut values = Vec::with_capacity(dim);
        let mut f32buf = [0u8; 4];
        for _ in 0..dim {
            r.read_exact(&mut f32buf)
                .map_err(|_| format_err(&format!("truncated in record {i} values")))?;
            values.push(f32::from_le_bytes(f32buf));
        }
        entries.push((id, values));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(format_err("trailing bytes after the declared records"));
    }
    Ok((dim, entries))
}

/// Read-only adapter over precomputed image embeddings.
pub struct CachedBackend {
    descriptor: BackendDescriptor,
    embeddings: BTreeMap<String, Vec<f32>>,
}

impl CachedBackend {
    pub fn open(path: &Path) -> Result<Self> {
        let (dim, entries) = read_embedding_cache(path)?;
        let display = path.display().to_string();
        if dim == 0 {
            return Err(Error::Format {
                path: display,
                reason: "cache declares dimension 0".into(),
            });
        }
        let mut embeddings = BTreeMap::new();
        for (id, values) in entries {
            embeddings.insert(id, values);
        }
        Ok(CachedBackend {
            descriptor: BackendDescriptor {
                name: format!("cache:{display}"),
                dim,
                vocabulary_size: DEFAULT_CACHE_VOCAB,
                differentiable_text: false,
            },
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

impl JointEmbeddingBackend for CachedBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode_image(&self, image: &ImageRef) -> Result<EmbeddingVector> {
        match image {
            ImageRef::Id(id) => match self.embeddings.get(id) {
                Some(values) => EmbeddingVector::new(values.clone()),
                None => Err(Error::MissingEmbedding(id.clone())),
            },
            ImageRef::Bag(_) => Err(Error::Capability {
                backend: self.descriptor.name.clone(),
                capability: "toy image specs".into(),
            }),
        }
    }

    fn encode_text(&self, _tokens: &TokenSequence) -> Result<EmbeddingVector> {
        Err(Error::Capability {
            backend: self.descriptor.name.clone(),
            capability: "text encoding (embeddings are precomputed)".into(),
        })
    }
}
