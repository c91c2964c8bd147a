//! Next-line code suggestions from line-transition graph embeddings.
//!
//! A corpus is reduced to canonical code lines; consecutive lines inside a
//! block become weighted undirected edges. Biased second-order random walks
//! over that graph feed a skip-gram model with hierarchical softmax, and the
//! resulting line vectors are stored as half-precision rows in an exact L2
//! index. At query time the current line's vector is looked up and its
//! nearest neighbors are returned as candidate next lines. Lines never seen
//! in training are mapped to a known line through a lexical text embedding,
//! reduced by PCA and searched in a second index.
//!
//! ```text
//! corpus ─► graph ─► walk ─► embed ─► index ──┐
//!                      │                      ├─► bundle ─► suggest
//!                      └──► fallback (text) ──┘
//! ```

pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod fallback;
pub mod graph;
pub mod index;
pub mod mapstore;
pub mod pipeline;
pub mod scalar;
pub mod service;
pub mod walk;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision skip-gram model, the type the pipeline trains.
pub type EmbeddingModel = embed::SkipGramModel<f32>;

/// Single-precision PCA projection, as stored in bundles.
pub type PcaModel = fallback::Pca<f32>;
