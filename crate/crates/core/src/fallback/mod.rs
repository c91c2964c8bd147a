//! Out-of-vocabulary resolution: lexical text vector, PCA down to the graph
//! embedding width, nearest neighbour in a separate text index.

mod lexical;
mod pca;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

pub use lexical::{LexicalEmbedder, LexicalEmbedderConfig, TextEncoder};
pub use pca::{fit_pca, fit_pca_with, Pca, PcaAccumulator, PcaOptions, PCA_VERSION};

use crate::error::{Error, IoContext, Result};
use crate::graph::NodeId;
use crate::index::VectorIndex;

pub const DEFAULT_PCA_SAMPLE_CAP: usize = 100_000;
const EMBED_CHUNK: usize = 4096;

/// Text vectors produced by an external encoder, looked up by line.
///
/// The file is JSON lines, one `{"line": "...", "embedding": [...]}` object
/// per line. Every embedding must have the same width.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    line: String,
    embedding: Vec<f32>,
}

impl PrecomputedEmbeddings {
    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path).at(path)?);
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (i, raw) in reader.lines().enumerate() {
            let raw = raw.at(path)?;
            if raw.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: EmbeddingRecord = serde_json::from_str(&raw).map_err(|e| parse_err(e.to_string()))?;
            let d = *dim.get_or_insert(rec.embedding.len());
            if rec.embedding.len() != d || d == 0 {
                return Err(parse_err(format!("embedding has {} values, expected {d}", rec.embedding.len())));
            }
            if rec.embedding.iter().any(|x| !x.is_finite()) {
                return Err(parse_err("embedding contains non-finite values".into()));
            }
            vectors.insert(rec.line, rec.embedding);
        }
        let dim = dim.ok_or_else(|| Error::Input(format!("{} holds no embeddings", path.display())))?;
        Ok(Self { dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl TextEncoder for PrecomputedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, line: &str) -> Result<Vec<f32>> {
        self.vectors
            .get(line)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no precomputed embedding for line {line:?}")))
    }
}

fn embed_rows<E, S>(encoder: &E, lines: &[S]) -> Result<Vec<f32>>
where
    E: TextEncoder + ?Sized,
    S: AsRef<str> + Sync,
{
    let parts: Vec<Vec<f32>> = lines
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let mut out = Vec::with_capacity(chunk.len() * encoder.dim());
            for line in chunk {
                out.extend(encoder.embed(line.as_ref())?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Fits the text PCA on at most `sample_cap` lines, drawn uniformly with
/// `seed` when there are more. With `allow_rank_deficient` a vocabulary
/// smaller than `out_dim + 1` still gets a model.
pub fn fit_text_pca<E, S>(
    encoder: &E,
    lines: &[S],
    out_dim: usize,
    sample_cap: usize,
    seed: u64,
    opts: PcaOptions,
) -> Result<Pca<f32>>
where
    E: TextEncoder + ?Sized,
    S: AsRef<str> + Sync,
{
    if sample_cap == 0 {
        return Err(Error::Config("PCA sample cap must be positive".into()));
    }
    let mut picked: Vec<usize> = if lines.len() > sample_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, lines.len(), sample_cap).into_vec()
    } else {
        (0..lines.len()).collect()
    };
    picked.sort_unstable();
    let mut acc = PcaAccumulator::new(encoder.dim());
    for chunk in picked.chunks(EMBED_CHUNK) {
        let subset: Vec<&str> = chunk.iter().map(|&i| lines[i].as_ref()).collect();
        let rows = embed_rows(encoder, &subset)?;
        for row in rows.chunks_exact(encoder.dim()) {
            acc.push(row)?;
        }
    }
    let model: Pca<f64> = acc.finish(out_dim, opts)?;
    Ok(model.cast())
}

/// Row `i` is `reduce(embed(lines[i]))`, so text ids line up with graph ids.
pub fn build_text_index<E, S>(encoder: &E, lines: &[S], pca: &Pca<f32>) -> Result<VectorIndex>
where
    E: TextEncoder + ?Sized,
    S: AsRef<str> + Sync,
{
    if encoder.dim() != pca.in_dim() {
        return Err(Error::Config(format!(
            "encoder width {} does not match PCA input width {}",
            encoder.dim(),
            pca.in_dim()
        )));
    }
    let parts: Vec<Vec<f32>> = lines
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let mut out = Vec::with_capacity(chunk.len() * pca.out_dim());
            for line in chunk {
                out.extend(pca.reduce(&encoder.embed(line.as_ref())?));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    VectorIndex::from_rows(pca.out_dim(), &parts.concat())
}

/// Id of the vocabulary line textually closest to `line`.
pub fn resolve_oov<E>(line: &str, encoder: &E, pca: &Pca<f32>, text_index: &VectorIndex) -> Result<NodeId>
where
    E: TextEncoder + ?Sized,
{
    if text_index.count() == 0 {
        return Err(Error::Resolution("text index is empty".into()));
    }
    let query = pca.reduce(&encoder.embed(line)?);
    let hit = text_index.search(&query, 1)?;
    hit.first()
        .map(|r| r.id)
        .ok_or_else(|| Error::Resolution(format!("no text match for {line:?}")))
}
