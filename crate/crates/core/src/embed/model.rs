use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IoContext, Result};
use crate::graph::NodeId;
use crate::scalar::Scalar;

const CHECKPOINT_MAGIC: &[u8; 8] = b"NLSGCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Skip-gram weights: one input vector per token (the embeddings) and one
/// vector per Huffman internal node. Both matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipGramModel<T> {
    dim: usize,
    vocab_size: usize,
    pub(crate) input: Vec<T>,
    pub(crate) internal: Vec<T>,
}

impl<T: Scalar> SkipGramModel<T> {
    /// Input components drawn from `U(-0.5/dim, 0.5/dim)`, internal vectors
    /// zeroed.
    pub fn initialize(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = 0.5 / dim as f64;
        let input = (0..vocab_size * dim)
            .map(|_| T::from_f64_lossy(rng.gen_range(-half..half)))
            .collect();
        Self {
            dim,
            vocab_size,
            input,
            internal: vec![T::zero(); vocab_size.saturating_sub(1) * dim],
        }
    }

    pub fn from_parts(vocab_size: usize, dim: usize, input: Vec<T>, internal: Vec<T>) -> Result<Self> {
        if input.len() != vocab_size * dim || internal.len() != vocab_size.saturating_sub(1) * dim {
            return Err(Error::Config(format!(
                "matrix sizes {}/{} do not match V={vocab_size} d={dim}",
                input.len(),
                internal.len()
            )));
        }
        Ok(Self {
            dim,
            vocab_size,
            input,
            internal,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn input_vector(&self, id: NodeId) -> &[T] {
        let i = id as usize * self.dim;
        &self.input[i..i + self.dim]
    }

    pub fn input_vector_mut(&mut self, id: NodeId) -> &mut [T] {
        let i = id as usize * self.dim;
        &mut self.input[i..i + self.dim]
    }

    pub fn internal_vector(&self, node: u32) -> &[T] {
        let i = node as usize * self.dim;
        &self.internal[i..i + self.dim]
    }

    pub fn internal_vector_mut(&mut self, node: u32) -> &mut [T] {
        let i = node as usize * self.dim;
        &mut self.internal[i..i + self.dim]
    }

    pub fn input_matrix(&self) -> &[T] {
        &self.input
    }

    pub fn internal_matrix(&self) -> &[T] {
        &self.internal
    }

    pub fn cast<U: Scalar>(&self) -> SkipGramModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN))).collect();
        SkipGramModel {
            dim: self.dim,
            vocab_size: self.vocab_size,
            input: conv(&self.input),
            internal: conv(&self.internal),
        }
    }

    /// First non-finite entry, reported as `(matrix, row)`.
    pub fn find_non_finite(&self) -> Option<(&'static str, usize)> {
        let scan = |m: &[T]| m.iter().position(|x| !x.is_finite()).map(|p| p / self.dim.max(1));
        scan(&self.input)
            .map(|r| ("input", r))
            .or_else(|| scan(&self.internal).map(|r| ("internal", r)))
    }

    /// Checkpoint layout, little-endian: magic `NLSGCKPT`, version `u32`,
    /// vocab size `u64`, dim `u32`, then the input matrix and the internal
    /// matrix as `f32`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).at(path)?);
        w.write_all(CHECKPOINT_MAGIC).at(path)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).at(path)?;
        w.write_all(&(self.vocab_size as u64).to_le_bytes()).at(path)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).at(path)?;
        for x in self.input.iter().chain(&self.internal) {
            w.write_all(&x.to_f32_lossy().to_le_bytes()).at(path)?;
        }
        w.flush().at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).at(path)?);
        let mut header = [0u8; 24];
        r.read_exact(&mut header)
            .map_err(|_| Error::Format(format!("{}: truncated checkpoint header", path.display())))?;
        if &header[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("{}: not a model checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let vocab_size = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        let total = (vocab_size + vocab_size.saturating_sub(1)) * dim;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).at(path)?;
        if bytes.len() != total * 4 {
            return Err(Error::Format(format!(
                "{}: expected {} payload bytes, found {}",
                path.display(),
                total * 4,
                bytes.len()
            )));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64));
        let input = values.by_ref().take(vocab_size * dim).collect();
        let internal = values.collect();
        Self::from_parts(vocab_size, dim, input, internal)
    }
}

/// Single-precision embedding rows for the most frequent tokens, row `i`
/// belonging to token id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Rows for ids `0..min(top_n, V)`, which are the most frequent lines.
pub fn extract_embeddings<T: Scalar>(model: &SkipGramModel<T>, top_n: usize) -> EmbeddingTable {
    let n = top_n.min(model.vocab_size());
    EmbeddingTable {
        dim: model.dim(),
        data: model.input[..n * model.dim()].iter().map(|x| x.to_f32_lossy()).collect(),
    }
}
