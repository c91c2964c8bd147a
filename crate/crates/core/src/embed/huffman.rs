use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::graph::NodeId;

/// Huffman coding tree over token counts, the output layer of hierarchical
/// softmax.
///
/// Internal nodes are numbered `0..V-1` in creation order, so the root is
/// `V-2`. For each token the tree stores the root-to-leaf sequence of internal
/// nodes (`path`) and the branch bit taken at each of them (`code`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTree {
    counts: Vec<u64>,
    offsets: Vec<usize>,
    codes: Vec<u8>,
    points: Vec<u32>,
}

impl HuffmanTree {
    /// Builds the tree. Among equal-weight subtrees the lower id merges
    /// first; leaves are ids `0..V`, internal nodes follow in creation order.
    pub fn build(counts: &[u64]) -> Result<Self> {
        let v = counts.len();
        if v < 2 {
            return Err(Error::Config(format!(
                "hierarchical softmax needs at least 2 tokens, got {v}"
            )));
        }
        let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
            counts.iter().enumerate().map(|(i, &c)| Reverse((c, i))).collect();
        let mut parent = vec![0usize; 2 * v - 1];
        let mut bit = vec![0u8; 2 * v - 1];
        for k in 0..v - 1 {
            let Reverse((wa, a)) = heap.pop().expect("heap holds at least two subtrees");
            let Reverse((wb, b)) = heap.pop().expect("heap holds at least two subtrees");
            let node = v + k;
            parent[a] = node;
            parent[b] = node;
            bit[b] = 1;
            heap.push(Reverse((wa + wb, node)));
        }
        let root = 2 * v - 2;

        let mut offsets = Vec::with_capacity(v + 1);
        let mut codes = Vec::new();
        let mut points = Vec::new();
        offsets.push(0);
        let mut path_codes = Vec::new();
        let mut path_points = Vec::new();
        for leaf in 0..v {
            path_codes.clear();
            path_points.clear();
            let mut n = leaf;
            while n != root {
                path_codes.push(bit[n]);
                n = parent[n];
                path_points.push((n - v) as u32);
            }
            codes.extend(path_codes.iter().rev());
            points.extend(path_points.iter().rev());
            offsets.push(codes.len());
        }
        Ok(Self {
            counts: counts.to_vec(),
            offsets,
            codes,
            points,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn internal_count(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn count(&self, id: NodeId) -> u64 {
        self.counts[id as usize]
    }

    /// Branch bits from the root down to the leaf.
    pub fn code(&self, id: NodeId) -> &[u8] {
        let i = id as usize;
        &self.codes[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Internal node indices from the root down to the leaf's parent.
    pub fn path(&self, id: NodeId) -> &[u32] {
        let i = id as usize;
        &self.points[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn code_len(&self, id: NodeId) -> usize {
        self.offsets[id as usize + 1] - self.offsets[id as usize]
    }

    /// Sum over tokens of count times code length.
    pub fn weighted_length(&self) -> u64 {
        (0..self.counts.len())
            .map(|i| self.counts[i] * self.code_len(i as NodeId) as u64)
            .sum()
    }
}
