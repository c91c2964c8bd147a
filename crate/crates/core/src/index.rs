//! Exact nearest-neighbor search over half-precision rows.
//!
//! Rows are stored as IEEE 754 binary16 (round to nearest, ties to even) and
//! widened to `f32` for distance arithmetic. Distances are squared Euclidean,
//! accumulated in `f32` in ascending component order. Results are sorted by
//! distance, then by row id.
//!
//! File layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "NLFLATL2"
//! 8       4     version (u32)
//! 12      4     dim (u32)
//! 16      8     count (u64)
//! 24      2*dim*count  row-major binary16 payload
//! ```

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use half::f16;
use half::slice::HalfFloatSliceExt;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"NLFLATL2";
pub const INDEX_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: u32,
    /// Squared Euclidean distance.
    pub distance: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    count: usize,
    data: Vec<f16>,
}

#[derive(PartialEq)]
struct Candidate(f32, u32);

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl VectorIndex {
    /// Rounds every component to binary16. Fails on non-finite components
    /// or magnitudes above 65504, naming the row.
    pub fn from_rows(dim: usize, rows: &[f32]) -> Result<Self> {
        if dim == 0 || rows.is_empty() || !rows.len().is_multiple_of(dim) {
            return Err(Error::Build(format!(
                "need a non-empty row-major table with dim > 0, got {} values for dim {dim}",
                rows.len()
            )));
        }
        if let Some(pos) = rows.iter().position(|x| !x.is_finite() || x.abs() > f16::MAX.to_f32()) {
            return Err(Error::Build(format!(
                "row {} component {} = {} is not representable in binary16",
                pos / dim,
                pos % dim,
                rows[pos]
            )));
        }
        let mut data = vec![f16::ZERO; rows.len()];
        data.as_mut_slice().convert_from_f32_slice(rows);
        Ok(Self {
            dim,
            count: rows.len() / dim,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn payload_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f16>()
    }

    pub fn raw_row(&self, id: usize) -> &[f16] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row(&self, id: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.dim];
        self.raw_row(id).convert_to_f32_slice(&mut out);
        out
    }

    /// The `min(k, count)` rows closest to `query`.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<QueryResult>> {
        if query.len() != self.dim {
            return Err(Error::Query(format!(
                "query has {} dimensions, index has {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::Query("k must be at least 1".into()));
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(Error::Query("query contains non-finite values".into()));
        }
        let k = k.min(self.count);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let mut row = vec![0.0f32; self.dim];
        for (id, stored) in self.data.chunks_exact(self.dim).enumerate() {
            stored.convert_to_f32_slice(&mut row);
            let mut dist = 0.0f32;
            for (a, b) in query.iter().zip(&row) {
                let d = a - b;
                dist += d * d;
            }
            let cand = Candidate(dist, id as u32);
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(cand);
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|Candidate(distance, id)| QueryResult { id, distance })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.count as u64).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("index truncated: {} header bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("not a vector index file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(Error::Format(format!(
                "index version {version} is not supported (expected {INDEX_VERSION})"
            )));
        }
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let expected = dim
            .checked_mul(count)
            .and_then(|n| n.checked_mul(2))
            .ok_or_else(|| Error::Format("index header sizes overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "index payload is {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        if dim == 0 || count == 0 {
            return Err(Error::Format("index has zero rows or zero dimensions".into()));
        }
        let data = payload
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok(Self { dim, count, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn build_index(table: &EmbeddingTable) -> Result<VectorIndex> {
    VectorIndex::from_rows(table.dim, &table.data)
}
