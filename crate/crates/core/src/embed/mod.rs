//! Skip-gram with hierarchical softmax, trained on random-walk corpora.
//!
//! For every center token `c` and every context token `o` inside a randomly
//! shrunk window, each internal node `j` on `o`'s Huffman path contributes a
//! logistic decision with target `1 - code_j`. The update is the classic
//! word2vec one: `g = (1 - code_j - sigmoid(v_c . u_j)) * lr`, `u_j += g * v_c`
//! and `v_c += sum_j g * u_j`, both using pre-update values.
//!
//! With `workers == 1` training is fully deterministic. With more workers the
//! walk corpus is partitioned and the shared matrices are updated lock-free;
//! concurrent writes to the same component may interleave.

mod huffman;
mod model;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use huffman::HuffmanTree;
pub use model::{extract_embeddings, EmbeddingTable, SkipGramModel};

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::scalar::{axpy, dot, Scalar};
use crate::walk::WalkCorpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub vector_size: usize,
    pub window: usize,
    pub min_count: u64,
    pub workers: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self {
            vector_size: 128,
            window: 5,
            min_count: 1,
            workers: cores.saturating_sub(1).max(1),
            epochs: 100,
            initial_lr: 0.025,
            min_lr: 0.0001,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vector_size == 0 || self.window == 0 || self.epochs == 0 || self.workers == 0 {
            return Err(Error::Config(
                "vector_size, window, epochs and workers must all be at least 1".into(),
            ));
        }
        if !(self.initial_lr > self.min_lr && self.min_lr > 0.0) {
            return Err(Error::Config(format!(
                "need initial_lr > min_lr > 0, got {} and {}",
                self.initial_lr, self.min_lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    /// Mean loss per (center, context) pair, one entry per epoch.
    pub epoch_loss: Vec<f64>,
    pub pairs: u64,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// One hierarchical-softmax step for a (center, context) pair. `center` is
/// the center's input row, `internal` the full internal-node matrix. Returns
/// the pair loss before the update.
#[inline]
fn hs_pair_step<T: Scalar>(
    center: &mut [T],
    internal: &mut [T],
    path: &[u32],
    code: &[u8],
    lr: T,
    neu1e: &mut [T],
) -> f64 {
    let dim = center.len();
    neu1e.iter_mut().for_each(|x| *x = T::zero());
    let mut loss = 0.0;
    for (&node, &bit) in path.iter().zip(code) {
        let row = &mut internal[node as usize * dim..(node as usize + 1) * dim];
        let s = sigmoid(dot(center, row));
        let label = if bit == 0 { T::one() } else { T::zero() };
        let g = (label - s) * lr;
        let s64 = s.to_f64().unwrap_or(0.5);
        loss -= if bit == 0 { s64.max(1e-12).ln() } else { (1.0 - s64).max(1e-12).ln() };
        axpy(g, row, neu1e);
        axpy(g, center, row);
    }
    axpy(T::one(), neu1e, center);
    loss
}

/// Loss of one (center, context) pair:
/// `sum_j -[b_j ln(1 - s_j) + (1 - b_j) ln s_j]` with `s_j = sigmoid(v_c . u_j)`.
pub fn pair_loss<T: Scalar>(model: &SkipGramModel<T>, tree: &HuffmanTree, center: NodeId, context: NodeId) -> T {
    let v = model.input_vector(center);
    let mut total = T::zero();
    for (&node, &bit) in tree.path(context).iter().zip(tree.code(context)) {
        let u = model.internal_vector(node);
        let x: T = v.iter().zip(u).map(|(a, b)| *a * *b).sum();
        let s = sigmoid(x);
        let b = if bit == 1 { T::one() } else { T::zero() };
        total -= b * (T::one() - s).ln() + (T::one() - b) * s.ln();
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient<T> {
    /// d loss / d v_center
    pub center: Vec<T>,
    /// d loss / d u_node for each internal node on the context's path.
    pub internal: Vec<(u32, Vec<T>)>,
}

/// Analytic gradient of [`pair_loss`], read off the training update itself:
/// one step at unit learning rate moves every parameter by minus its
/// gradient.
pub fn pair_gradient<T: Scalar>(
    model: &SkipGramModel<T>,
    tree: &HuffmanTree,
    center: NodeId,
    context: NodeId,
) -> PairGradient<T> {
    let mut scratch = model.clone();
    let dim = model.dim();
    let mut neu1e = vec![T::zero(); dim];
    let path = tree.path(context);
    let row = center as usize * dim;
    let (input, internal) = (&mut scratch.input, &mut scratch.internal);
    hs_pair_step(
        &mut input[row..row + dim],
        internal,
        path,
        tree.code(context),
        T::one(),
        &mut neu1e,
    );
    let delta = |after: &[T], before: &[T]| after.iter().zip(before).map(|(a, b)| *b - *a).collect();
    PairGradient {
        center: delta(scratch.input_vector(center), model.input_vector(center)),
        internal: path
            .iter()
            .map(|&n| (n, delta(scratch.internal_vector(n), model.internal_vector(n))))
            .collect(),
    }
}

struct Schedule {
    initial: f64,
    min: f64,
    total: u64,
}

impl Schedule {
    fn lr(&self, done: u64) -> f64 {
        let progress = (done as f64 / self.total.max(1) as f64).min(1.0);
        (self.initial - (self.initial - self.min) * progress).max(self.min)
    }
}

/// Raw views of the shared matrices for lock-free parallel updates.
struct SharedMatrices<T> {
    input: *mut T,
    input_len: usize,
    internal: *mut T,
    internal_len: usize,
}

// Workers race on vector components by design of the parallel mode.
unsafe impl<T: Send> Send for SharedMatrices<T> {}
unsafe impl<T: Send> Sync for SharedMatrices<T> {}

struct Worker<'a, T> {
    tree: &'a HuffmanTree,
    window: usize,
    min_count: u64,
    dim: usize,
    schedule: &'a Schedule,
    rng: ChaCha8Rng,
    neu1e: Vec<T>,
    kept: Vec<NodeId>,
    loss: f64,
    pairs: u64,
}

const SYNC_EVERY: u64 = 10_000;

impl<T: Scalar> Worker<'_, T> {
    /// Trains on `walks`, advancing `progress` (token positions done across
    /// all workers).
    fn run<'w>(&mut self, walks: impl Iterator<Item = &'w [NodeId]>, input: &mut [T], internal: &mut [T], progress: &AtomicU64) {
        let mut local = 0u64;
        let mut done = progress.load(Ordering::Relaxed);
        let dim = self.dim;
        for walk in walks {
            self.kept.clear();
            self.kept.extend(walk.iter().copied().filter(|&t| self.tree.count(t) >= self.min_count));
            let len = self.kept.len();
            for i in 0..len {
                let lr = T::from_f64_lossy(self.schedule.lr(done + local));
                local += 1;
                let c = self.kept[i] as usize;
                let span = self.window - self.rng.gen_range(0..self.window);
                let lo = i.saturating_sub(span);
                let hi = (i + span).min(len - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let o = self.kept[j];
                    let center = &mut input[c * dim..(c + 1) * dim];
                    self.loss += hs_pair_step(center, internal, self.tree.path(o), self.tree.code(o), lr, &mut self.neu1e);
                    self.pairs += 1;
                }
                if local >= SYNC_EVERY {
                    done = progress.fetch_add(local, Ordering::Relaxed) + local;
                    local = 0;
                }
            }
        }
        progress.fetch_add(local, Ordering::Relaxed);
    }
}

/// Trains (or continues training) a skip-gram model on `walks`.
///
/// The learning rate decays linearly from `initial_lr` to `min_lr` over
/// `epochs * walks.total_tokens()` positions. Passing an existing model
/// continues from its weights, which is how sharded training carries one
/// model across shards.
pub fn train_skipgram_hs<T: Scalar>(
    walks: &WalkCorpus,
    tree: &HuffmanTree,
    cfg: &TrainConfig,
    model: Option<SkipGramModel<T>>,
) -> Result<(SkipGramModel<T>, TrainStats)> {
    cfg.validate()?;
    let vocab_size = tree.vocab_size();
    let mut model = match model {
        Some(m) => {
            if m.dim() != cfg.vector_size || m.vocab_size() != vocab_size {
                return Err(Error::Config(format!(
                    "model is {}x{}, config and tree need {}x{}",
                    m.vocab_size(),
                    m.dim(),
                    vocab_size,
                    cfg.vector_size
                )));
            }
            m
        }
        None => SkipGramModel::initialize(vocab_size, cfg.vector_size, cfg.seed),
    };
    if let Some(bad) = walks.iter().flatten().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::Input(format!("walk references token {bad} outside vocabulary of {vocab_size}")));
    }

    let schedule = Schedule {
        initial: cfg.initial_lr,
        min: cfg.min_lr,
        total: (cfg.epochs * walks.total_tokens()) as u64,
    };
    let progress = AtomicU64::new(0);
    let workers = cfg.workers.min(walks.len().max(1));
    let mut stats = TrainStats::default();
    let dim = cfg.vector_size;
    let make_worker = |epoch: usize, w: usize| Worker {
        tree,
        window: cfg.window,
        min_count: cfg.min_count,
        dim,
        schedule: &schedule,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ ((epoch as u64) << 32) ^ (w as u64).wrapping_mul(0x9E37_79B9)),
        neu1e: vec![T::zero(); dim],
        kept: Vec::new(),
        loss: 0.0,
        pairs: 0,
    };

    for epoch in 0..cfg.epochs {
        let (loss, pairs) = if workers == 1 {
            let mut worker = make_worker(epoch, 0);
            worker.run(walks.iter(), &mut model.input, &mut model.internal, &progress);
            (worker.loss, worker.pairs)
        } else {
            let shared = SharedMatrices {
                input: model.input.as_mut_ptr(),
                input_len: model.input.len(),
                internal: model.internal.as_mut_ptr(),
                internal_len: model.internal.len(),
            };
            let chunk = walks.len().div_ceil(workers);
            let results: Vec<(f64, u64)> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let shared = &shared;
                        let progress = &progress;
                        let mut worker = make_worker(epoch, w);
                        s.spawn(move || {
                            // SAFETY: the buffers outlive the scope and are not
                            // resized; overlapping component writes between
                            // workers are the accepted hogwild races.
                            let input = unsafe { std::slice::from_raw_parts_mut(shared.input, shared.input_len) };
                            let internal =
                                unsafe { std::slice::from_raw_parts_mut(shared.internal, shared.internal_len) };
                            let range = (w * chunk).min(walks.len())..((w + 1) * chunk).min(walks.len());
                            worker.run(range.map(|i| walks.get(i)), input, internal, progress);
                            (worker.loss, worker.pairs)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
            });
            results.iter().fold((0.0, 0), |(l, p), (wl, wp)| (l + wl, p + wp))
        };
        if let Some((matrix, row)) = model.find_non_finite() {
            return Err(Error::Training(format!(
                "non-finite value in {matrix} row {row} after epoch {}",
                epoch + 1
            )));
        }
        stats.pairs += pairs;
        stats.epoch_loss.push(if pairs == 0 { 0.0 } else { loss / pairs as f64 });
    }
    Ok((model, stats))
}
