//! Vocabulary and line-transition graph construction.
//!
//! Every distinct canonical line becomes a node. Ids are dense and ordered by
//! descending frequency (ties by line text), so "the N most frequent lines" is
//! always the id prefix `0..N`.
//!
//! Edges are undirected: the transition `a -> b` and `b -> a` land on the same
//! record `(min, max)`. On disk they are written as `.edg` shards, one edge per
//! line as `u<TAB>v<TAB>weight` with `u < v`, sorted by `(u, v)`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::corpus::LineSequence;
use crate::error::{Error, IoContext, Result};

pub type NodeId = u32;

pub const DEFAULT_MAX_EDGES_PER_SHARD: usize = 10_000_000;

const VOCAB_HEADER: &str = "#nextline-vocab\tv1";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    lines: Vec<String>,
    ids: HashMap<String, NodeId>,
    freq: Vec<u64>,
}

impl Vocabulary {
    pub fn build<'a, I>(sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a LineSequence>,
    {
        let mut counts: HashMap<&'a str, u64> = HashMap::new();
        for seq in sequences {
            for line in seq.lines() {
                *counts.entry(line.as_str()).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Input("empty corpus: no code lines retained".into()));
        }
        let mut entries: Vec<(&str, u64)> = counts.into_iter().collect();
        entries.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_sorted(entries.into_iter().map(|(l, f)| (l.to_owned(), f)))
    }

    fn from_sorted(entries: impl Iterator<Item = (String, u64)>) -> Result<Self> {
        let mut vocab = Vocabulary::default();
        for (line, f) in entries {
            let id = NodeId::try_from(vocab.lines.len())
                .map_err(|_| Error::Input("vocabulary exceeds u32 id space".into()))?;
            if vocab.ids.insert(line.clone(), id).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary line {line:?}")));
            }
            vocab.lines.push(line);
            vocab.freq.push(f);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn id(&self, line: &str) -> Option<NodeId> {
        self.ids.get(line).copied()
    }

    pub fn line(&self, id: NodeId) -> Option<&str> {
        self.lines.get(id as usize).map(String::as_str)
    }

    pub fn freq(&self, id: NodeId) -> Option<u64> {
        self.freq.get(id as usize).copied()
    }

    /// Occurrence counts indexed by id.
    pub fn freqs(&self) -> &[u64] {
        &self.freq
    }

    /// Lines indexed by id.
    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// Sidecar format: a header line, then `id<TAB>freq<TAB>line` per entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).at(path)?);
        writeln!(w, "{VOCAB_HEADER}").at(path)?;
        for (id, (line, f)) in self.lines.iter().zip(&self.freq).enumerate() {
            writeln!(w, "{id}\t{f}\t{line}").at(path)?;
        }
        w.flush().at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path).at(path)?);
        let mut lines = reader.lines();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        match lines.next() {
            Some(h) if h.as_deref().ok() == Some(VOCAB_HEADER) => {}
            _ => return Err(parse_err(1, "missing vocabulary header".into())),
        }
        let mut entries = Vec::new();
        for (i, raw) in lines.enumerate() {
            let lineno = i + 2;
            let raw = raw.at(path)?;
            let mut parts = raw.splitn(3, '\t');
            let (Some(id), Some(f), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err(lineno, "expected id<TAB>freq<TAB>line".into()));
            };
            let id: usize = id.parse().map_err(|_| parse_err(lineno, format!("bad id {id:?}")))?;
            if id != entries.len() {
                return Err(parse_err(lineno, format!("ids must be contiguous, got {id}")));
            }
            let f: u64 = f.parse().map_err(|_| parse_err(lineno, format!("bad frequency {f:?}")))?;
            entries.push((text.to_owned(), f));
        }
        Self::from_sorted(entries.into_iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub u: NodeId,
    pub v: NodeId,
    pub weight: u64,
}

/// Undirected transition counts keyed canonically with `u < v`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeAccumulator {
    weights: HashMap<(NodeId, NodeId), u64>,
}

impl EdgeAccumulator {
    pub fn add_transition(&mut self, a: NodeId, b: NodeId) {
        if a == b {
            return;
        }
        let key = if a < b { (a, b) } else { (b, a) };
        *self.weights.entry(key).or_insert(0) += 1;
    }

    pub fn add_sequence(&mut self, seq: &LineSequence, vocab: &Vocabulary) -> Result<()> {
        let lookup = |line: &str| {
            vocab.id(line).ok_or_else(|| {
                Error::Internal(format!(
                    "line {line:?} from {} missing from vocabulary",
                    seq.source_path.display()
                ))
            })
        };
        for block in &seq.blocks {
            let mut prev: Option<NodeId> = None;
            for line in block {
                let id = lookup(line.as_str())?;
                if let Some(p) = prev {
                    self.add_transition(p, id);
                }
                prev = Some(id);
            }
        }
        Ok(())
    }

    fn merge(mut self, other: Self) -> Self {
        let (mut big, small) = if self.weights.len() >= other.weights.len() {
            (std::mem::take(&mut self.weights), other.weights)
        } else {
            (other.weights, std::mem::take(&mut self.weights))
        };
        for (k, w) in small {
            *big.entry(k).or_insert(0) += w;
        }
        Self { weights: big }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, a: NodeId, b: NodeId) -> u64 {
        let key = if a < b { (a, b) } else { (b, a) };
        self.weights.get(&key).copied().unwrap_or(0)
    }

    pub fn total_weight(&self) -> u64 {
        self.weights.values().sum()
    }

    pub fn sorted_edges(&self) -> Vec<Edge> {
        let mut edges: Vec<Edge> = self
            .weights
            .iter()
            .map(|(&(u, v), &weight)| Edge { u, v, weight })
            .collect();
        edges.sort_unstable();
        edges
    }
}

pub fn accumulate_edges(sequences: &[LineSequence], vocab: &Vocabulary) -> Result<EdgeAccumulator> {
    sequences
        .par_iter()
        .try_fold(EdgeAccumulator::default, |mut acc, seq| {
            acc.add_sequence(seq, vocab)?;
            Ok(acc)
        })
        .try_reduce(EdgeAccumulator::default, |a, b| Ok(a.merge(b)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeShard {
    pub path: PathBuf,
    pub edge_count: usize,
}

/// Writes the edges sorted by `(u, v)` into consecutive shards of at most
/// `max_edges_per_shard` edges each.
pub fn write_edge_shards(acc: &EdgeAccumulator, dir: &Path, max_edges_per_shard: usize) -> Result<Vec<EdgeShard>> {
    if max_edges_per_shard == 0 {
        return Err(Error::Config("max_edges_per_shard must be at least 1".into()));
    }
    fs::create_dir_all(dir).at(dir)?;
    let edges = acc.sorted_edges();
    let mut shards = Vec::with_capacity(edges.len().div_ceil(max_edges_per_shard));
    for (i, chunk) in edges.chunks(max_edges_per_shard).enumerate() {
        let path = dir.join(format!("edges-{i:05}.edg"));
        let mut w = BufWriter::new(File::create(&path).at(&path)?);
        for e in chunk {
            writeln!(w, "{}\t{}\t{}", e.u, e.v, e.weight).at(&path)?;
        }
        w.flush().at(&path)?;
        shards.push(EdgeShard {
            path,
            edge_count: chunk.len(),
        });
    }
    Ok(shards)
}

pub fn read_edge_shard(path: &Path) -> Result<Vec<Edge>> {
    let reader = BufReader::new(File::open(path).at(path)?);
    let mut edges = Vec::new();
    for (i, raw) in reader.lines().enumerate() {
        let raw = raw.at(path)?;
        edges.push(parse_edge_line(&raw).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?);
    }
    Ok(edges)
}

fn parse_edge_line(raw: &str) -> std::result::Result<Edge, String> {
    let fields: Vec<&str> = raw.split('\t').collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 TAB-separated fields, found {} in {raw:?}", fields.len()));
    }
    let num = |s: &str, what: &str| -> std::result::Result<u64, String> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("{what} {s:?} is not a decimal integer"));
        }
        s.parse::<u64>().map_err(|e| format!("{what} {s:?}: {e}"))
    };
    let u = NodeId::try_from(num(fields[0], "node id")?).map_err(|e| e.to_string())?;
    let v = NodeId::try_from(num(fields[1], "node id")?).map_err(|e| e.to_string())?;
    let weight = num(fields[2], "weight")?;
    if u == v {
        return Err(format!("self-loop on node {u}"));
    }
    if weight == 0 {
        return Err("weight must be at least 1".into());
    }
    Ok(Edge { u, v, weight })
}
