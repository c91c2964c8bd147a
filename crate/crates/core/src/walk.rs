//! Second-order biased random walks over the undirected transition graph.
//!
//! From current node `v` having arrived from `t`, the unnormalized weight of
//! moving to neighbor `x` is `alpha * w(v, x)` where `alpha` is `1/p` when
//! `x == t`, `1` when `x` is adjacent to `t`, and `1/q` otherwise. The first
//! step of a walk has no `t` and is proportional to edge weight.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::graph::{read_edge_shard, Edge, EdgeShard, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    /// Return parameter.
    pub p: f64,
    /// In-out parameter.
    pub q: f64,
    pub num_walks: usize,
    pub walk_length: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            p: 1.0,
            q: 0.5,
            num_walks: 10,
            walk_length: 10,
            seed: 1,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p.is_finite()) || !(self.q > 0.0 && self.q.is_finite()) {
            return Err(Error::Config(format!("p and q must be positive, got p={} q={}", self.p, self.q)));
        }
        if self.num_walks == 0 || self.walk_length == 0 {
            return Err(Error::Config("num_walks and walk_length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Symmetric weighted adjacency in compressed-row form. Neighbor lists are
/// sorted by node id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdjacencyView {
    offsets: Vec<usize>,
    neighbors: Vec<NodeId>,
    weights: Vec<f64>,
}

impl AdjacencyView {
    /// Builds the view for nodes `0..num_nodes`. Each edge is added in both
    /// directions; repeated edges have their weights summed.
    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut arcs: Vec<(NodeId, NodeId, u64)> = Vec::new();
        for e in edges {
            if e.u as usize >= num_nodes || e.v as usize >= num_nodes {
                return Err(Error::Input(format!(
                    "edge ({}, {}) references a node outside 0..{num_nodes}",
                    e.u, e.v
                )));
            }
            if e.u == e.v {
                return Err(Error::Input(format!("self-loop on node {}", e.u)));
            }
            arcs.push((e.u, e.v, e.weight));
            arcs.push((e.v, e.u, e.weight));
        }
        arcs.sort_unstable_by_key(|&(a, b, _)| (a, b));

        let mut offsets = vec![0usize; num_nodes + 1];
        let mut neighbors = Vec::with_capacity(arcs.len());
        let mut weights = Vec::with_capacity(arcs.len());
        let mut last: Option<(NodeId, NodeId)> = None;
        for (a, b, w) in arcs {
            if last == Some((a, b)) {
                *weights.last_mut().expect("merged arc has a predecessor") += w as f64;
                continue;
            }
            last = Some((a, b));
            neighbors.push(b);
            weights.push(w as f64);
            offsets[a as usize + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        Ok(Self {
            offsets,
            neighbors,
            weights,
        })
    }

    pub fn load(shards: &[EdgeShard], num_nodes: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for shard in shards {
            edges.extend(read_edge_shard(&shard.path)?);
        }
        Self::from_edges(num_nodes, edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_arcs(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, v: NodeId) -> (&[NodeId], &[f64]) {
        let (lo, hi) = (self.offsets[v as usize], self.offsets[v as usize + 1]);
        (&self.neighbors[lo..hi], &self.weights[lo..hi])
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.offsets[v as usize + 1] - self.offsets[v as usize]
    }

    pub fn weight(&self, a: NodeId, b: NodeId) -> Option<f64> {
        let (ns, ws) = self.neighbors(a);
        ns.binary_search(&b).ok().map(|i| ws[i])
    }

    pub fn is_adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.weight(a, b).is_some()
    }

    fn check_node(&self, v: NodeId) -> Result<()> {
        if (v as usize) < self.num_nodes() {
            Ok(())
        } else {
            Err(Error::Distribution(format!("node {v} is outside the graph")))
        }
    }
}

/// Fills `out` with the unnormalized bias-weighted scores of `cur`'s
/// neighbors, in neighbor order.
fn biased_scores(prev: Option<NodeId>, cur: NodeId, adj: &AdjacencyView, p: f64, q: f64, out: &mut Vec<f64>) {
    let (ns, ws) = adj.neighbors(cur);
    out.clear();
    let Some(t) = prev else {
        out.extend_from_slice(ws);
        return;
    };
    let (inv_p, inv_q) = (1.0 / p, 1.0 / q);
    // both lists are sorted, so adjacency to `t` is a merge
    let (tn, _) = adj.neighbors(t);
    let mut j = 0;
    for (&x, &w) in ns.iter().zip(ws) {
        let alpha = if x == t {
            inv_p
        } else {
            while j < tn.len() && tn[j] < x {
                j += 1;
            }
            if j < tn.len() && tn[j] == x {
                1.0
            } else {
                inv_q
            }
        };
        out.push(alpha * w);
    }
}

pub fn transition_distribution(
    prev: Option<NodeId>,
    cur: NodeId,
    adj: &AdjacencyView,
    cfg: &WalkConfig,
) -> Result<Vec<(NodeId, f64)>> {
    adj.check_node(cur)?;
    if adj.degree(cur) == 0 {
        return Err(Error::Distribution(format!("node {cur} has no neighbors")));
    }
    if let Some(t) = prev {
        adj.check_node(t)?;
        if !adj.is_adjacent(cur, t) {
            return Err(Error::Distribution(format!("previous node {t} is not adjacent to {cur}")));
        }
    }
    let mut scores = Vec::new();
    biased_scores(prev, cur, adj, cfg.p, cfg.q, &mut scores);
    let total: f64 = scores.iter().sum();
    let (ns, _) = adj.neighbors(cur);
    Ok(ns.iter().zip(scores).map(|(&x, s)| (x, s / total)).collect())
}

/// Draws the next node by inverse sampling over cumulative scores. Returns
/// `None` when `cur` has no neighbors.
pub fn sample_next<R: Rng + ?Sized>(
    prev: Option<NodeId>,
    cur: NodeId,
    adj: &AdjacencyView,
    cfg: &WalkConfig,
    rng: &mut R,
    scratch: &mut Vec<f64>,
) -> Option<NodeId> {
    if adj.degree(cur) == 0 {
        return None;
    }
    biased_scores(prev, cur, adj, cfg.p, cfg.q, scratch);
    let mut total = 0.0;
    for s in scratch.iter_mut() {
        total += *s;
        *s = total;
    }
    let r = rng.gen::<f64>() * total;
    let idx = scratch.partition_point(|&c| c <= r).min(scratch.len() - 1);
    Some(adj.neighbors(cur).0[idx])
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-walk seed, independent of scheduling order.
pub fn walk_seed(global_seed: u64, start: NodeId, walk_index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(global_seed) ^ start as u64) ^ walk_index as u64)
}

/// A flat store of walks: `tokens[offsets[i]..offsets[i + 1]]` is walk `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkCorpus {
    tokens: Vec<NodeId>,
    offsets: Vec<usize>,
}

impl Default for WalkCorpus {
    fn default() -> Self {
        Self {
            tokens: Vec::new(),
            offsets: vec![0],
        }
    }
}

impl WalkCorpus {
    pub fn push(&mut self, walk: &[NodeId]) {
        self.tokens.extend_from_slice(walk);
        self.offsets.push(self.tokens.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn get(&self, i: usize) -> &[NodeId] {
        &self.tokens[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[NodeId]> + '_ {
        self.offsets.windows(2).map(|w| &self.tokens[w[0]..w[1]])
    }

    /// Debug dump: one walk per line, ids separated by single spaces.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).at(path)?);
        for walk in self.iter() {
            let line: Vec<String> = walk.iter().map(u32::to_string).collect();
            writeln!(w, "{}", line.join(" ")).at(path)?;
        }
        w.flush().at(path)
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path).at(path)?);
        let mut corpus = Self::default();
        let mut walk = Vec::new();
        for (i, raw) in reader.lines().enumerate() {
            let raw = raw.at(path)?;
            walk.clear();
            for tok in raw.split(' ') {
                walk.push(tok.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("bad node id {tok:?}"),
                })?);
            }
            corpus.push(&walk);
        }
        Ok(corpus)
    }
}

fn walks_from(start: NodeId, adj: &AdjacencyView, cfg: &WalkConfig) -> Vec<NodeId> {
    if adj.degree(start) == 0 {
        return vec![start; cfg.num_walks];
    }
    let mut out = Vec::with_capacity(cfg.num_walks * cfg.walk_length);
    let mut scratch = Vec::new();
    for w in 0..cfg.num_walks {
        let mut rng = ChaCha8Rng::seed_from_u64(walk_seed(cfg.seed, start, w));
        let (mut prev, mut cur) = (None, start);
        out.push(cur);
        for _ in 1..cfg.walk_length {
            // a reached node always has at least the edge it came in on
            let next = sample_next(prev, cur, adj, cfg, &mut rng, &mut scratch).expect("walk reached an isolated node");
            out.push(next);
            prev = Some(cur);
            cur = next;
        }
    }
    out
}

/// `num_walks` walks from every node, ordered by start node then walk index.
/// Nodes with neighbors get walks of exactly `walk_length`; isolated nodes
/// get single-node walks.
pub fn generate_walks(adj: &AdjacencyView, cfg: &WalkConfig) -> Result<WalkCorpus> {
    cfg.validate()?;
    let per_node: Vec<Vec<NodeId>> = (0..adj.num_nodes() as NodeId)
        .into_par_iter()
        .map(|start| walks_from(start, adj, cfg))
        .collect();
    let mut corpus = WalkCorpus::default();
    for (start, tokens) in per_node.iter().enumerate() {
        let len = if adj.degree(start as NodeId) == 0 { 1 } else { cfg.walk_length };
        for walk in tokens.chunks(len) {
            corpus.push(walk);
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(u: NodeId, v: NodeId, weight: u64) -> Edge {
        Edge { u, v, weight }
    }

    fn path3() -> AdjacencyView {
        // A=0 - B=1 - C=2
        AdjacencyView::from_edges(3, [e(0, 1, 1), e(1, 2, 1)]).unwrap()
    }

    fn cfg(p: f64, q: f64) -> WalkConfig {
        WalkConfig {
            p,
            q,
            ..WalkConfig::default()
        }
    }

    #[test]
    fn adjacency_is_symmetric() {
        let adj = AdjacencyView::from_edges(2, [e(0, 1, 2)]).unwrap();
        assert_eq!(adj.neighbors(0), (&[1][..], &[2.0][..]));
        assert_eq!(adj.neighbors(1), (&[0][..], &[2.0][..]));
    }

    #[test]
    fn duplicate_edges_sum() {
        let adj = AdjacencyView::from_edges(2, [e(0, 1, 2), e(1, 0, 3)]).unwrap();
        assert_eq!(adj.weight(0, 1), Some(5.0));
        assert_eq!(adj.num_arcs(), 2);
    }

    #[test]
    fn load_sums_duplicates_across_shards() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.edg");
        let b = dir.path().join("b.edg");
        std::fs::write(&a, "0\t1\t2\n").unwrap();
        std::fs::write(&b, "0\t1\t1\n1\t2\t4\n").unwrap();
        let shards = [
            EdgeShard { path: a, edge_count: 1 },
            EdgeShard { path: b.clone(), edge_count: 2 },
        ];
        let adj = AdjacencyView::load(&shards, 4).unwrap();
        assert_eq!(adj.weight(1, 0), Some(3.0));
        assert_eq!(adj.weight(2, 1), Some(4.0));
        assert_eq!(adj.degree(3), 0);

        std::fs::write(&b, "0 1\n").unwrap();
        assert!(matches!(AdjacencyView::load(&shards, 4), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn out_of_range_edge_is_rejected() {
        assert!(AdjacencyView::from_edges(2, [e(0, 2, 1)]).is_err());
    }

    #[test]
    fn path_graph_with_dfs_bias() {
        let d = transition_distribution(Some(0), 1, &path3(), &cfg(1.0, 0.5)).unwrap();
        assert_eq!(d.len(), 2);
        assert!((d[0].1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((d[1].1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unbiased_walk_follows_weights() {
        // star around 0 with weights 1, 2, 5 plus an edge 1-2
        let adj = AdjacencyView::from_edges(4, [e(0, 1, 1), e(0, 2, 2), e(0, 3, 5), e(1, 2, 1)]).unwrap();
        let d = transition_distribution(Some(1), 0, &adj, &cfg(1.0, 1.0)).unwrap();
        let probs: Vec<f64> = d.iter().map(|x| x.1).collect();
        for (p, w) in probs.iter().zip([1.0, 2.0, 5.0]) {
            assert!((p - w / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn triangle_neighbor_of_previous_is_unbiased() {
        let adj = AdjacencyView::from_edges(3, [e(0, 1, 1), e(1, 2, 1), e(0, 2, 1)]).unwrap();
        let d = transition_distribution(Some(0), 1, &adj, &cfg(1.0, 0.5)).unwrap();
        assert!((d[0].1 - 0.5).abs() < 1e-12);
        assert!((d[1].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn return_parameter_scales_previous() {
        let d = transition_distribution(Some(0), 1, &path3(), &cfg(4.0, 1.0)).unwrap();
        // alpha(A) = 1/4, alpha(C) = 1
        assert!((d[0].1 - 0.2).abs() < 1e-12);
        assert!((d[1].1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn first_step_is_first_order() {
        let d = transition_distribution(None, 1, &path3(), &cfg(1.0, 0.5)).unwrap();
        assert!((d[0].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_distribution_errors() {
        let adj = AdjacencyView::from_edges(3, [e(0, 1, 1)]).unwrap();
        assert!(matches!(
            transition_distribution(None, 2, &adj, &cfg(1.0, 0.5)),
            Err(Error::Distribution(_))
        ));
        assert!(transition_distribution(Some(2), 0, &adj, &cfg(1.0, 0.5)).is_err());
    }

    #[test]
    fn two_node_block_bounces() {
        let adj = AdjacencyView::from_edges(2, [e(0, 1, 7)]).unwrap();
        let walks = generate_walks(&adj, &WalkConfig::default()).unwrap();
        assert_eq!(walks.get(0), &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn isolated_nodes_get_single_node_walks() {
        let adj = AdjacencyView::from_edges(3, [e(0, 1, 1)]).unwrap();
        let c = WalkConfig::default();
        let walks = generate_walks(&adj, &c).unwrap();
        assert_eq!(walks.len(), 3 * c.num_walks);
        for w in walks.iter().skip(2 * c.num_walks) {
            assert_eq!(w, &[2]);
        }
    }

    fn four_node() -> AdjacencyView {
        // 0-1, 1-2, 1-3, 2-3 with mixed weights
        AdjacencyView::from_edges(4, [e(0, 1, 2), e(1, 2, 1), e(1, 3, 3), e(2, 3, 1)]).unwrap()
    }

    #[test]
    fn walks_are_valid_counted_and_deterministic() {
        let adj = four_node();
        let c = WalkConfig {
            num_walks: 7,
            walk_length: 13,
            ..WalkConfig::default()
        };
        let walks = generate_walks(&adj, &c).unwrap();
        assert_eq!(walks.len(), 7 * 4);
        for (i, w) in walks.iter().enumerate() {
            assert_eq!(w.len(), 13);
            assert_eq!(w[0] as usize, i / 7);
            for pair in w.windows(2) {
                assert!(adj.is_adjacent(pair[0], pair[1]));
            }
        }
        assert_eq!(walks, generate_walks(&adj, &c).unwrap());
        let other = generate_walks(&adj, &WalkConfig { seed: 99, ..c }).unwrap();
        assert_ne!(walks, other);
    }

    #[test]
    fn empirical_second_step_matches_distribution() {
        let adj = four_node();
        let c = cfg(0.7, 2.5);
        for (t, v) in [(0, 1), (2, 1), (3, 2), (1, 3)] {
            let exact = transition_distribution(Some(t), v, &adj, &c).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut scratch = Vec::new();
            let n = 100_000;
            let mut counts = std::collections::HashMap::new();
            for _ in 0..n {
                let x = sample_next(Some(t), v, &adj, &c, &mut rng, &mut scratch).unwrap();
                *counts.entry(x).or_insert(0usize) += 1;
            }
            for (x, p) in exact {
                let emp = *counts.get(&x).unwrap_or(&0) as f64 / n as f64;
                assert!((emp - p).abs() < 0.02, "t={t} v={v} x={x}: {emp} vs {p}");
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let walks = generate_walks(&four_node(), &WalkConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("walks.txt");
        walks.write_dump(&path).unwrap();
        assert_eq!(WalkCorpus::read_dump(&path).unwrap(), walks);
    }

    #[test]
    fn invalid_config() {
        assert!(cfg(0.0, 1.0).validate().is_err());
        assert!(cfg(1.0, -1.0).validate().is_err());
        assert!(WalkConfig { num_walks: 0, ..WalkConfig::default() }.validate().is_err());
    }
}
