//! End-to-end training: corpus in, artifact directory out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, BlockSeparator, LanguageProfile, LineSequence};
use crate::embed::{extract_embeddings, train_skipgram_hs, HuffmanTree, TrainConfig};
use crate::error::{Error, IoContext, Result};
use crate::fallback::{
    build_text_index, fit_text_pca, LexicalEmbedder, LexicalEmbedderConfig, PcaOptions, TextEncoder,
    DEFAULT_PCA_SAMPLE_CAP, PCA_VERSION,
};
use crate::graph::{accumulate_edges, write_edge_shards, Vocabulary, DEFAULT_MAX_EDGES_PER_SHARD};
use crate::index::{build_index, INDEX_VERSION};
use crate::mapstore::{MapStore, STORE_VERSION};
use crate::walk::{generate_walks, walk_seed, AdjacencyView, WalkConfig, WalkCorpus};
use crate::EmbeddingModel;

pub const MAIN_INDEX_FILE: &str = "main.index";
pub const TEXT_INDEX_FILE: &str = "text.index";
pub const PCA_FILE: &str = "pca.model";
pub const LINE_TO_ID_DIR: &str = "line_to_id.kv";
pub const ID_TO_LINE_DIR: &str = "id_to_line.kv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// The five files a bundle consists of, in load order.
pub const ARTIFACTS: [&str; 5] = [MAIN_INDEX_FILE, TEXT_INDEX_FILE, PCA_FILE, LINE_TO_ID_DIR, ID_TO_LINE_DIR];

pub const DEFAULT_TOP_N: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: LanguageProfile,
    pub separator: BlockSeparator,
    pub walk: WalkConfig,
    pub train: TrainConfig,
    /// Only the `top_n` most frequent lines are indexed and mapped.
    pub top_n: usize,
    pub max_edges_per_shard: usize,
    pub lexical: LexicalEmbedderConfig,
    pub pca_sample_cap: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            profile: LanguageProfile::python(),
            separator: BlockSeparator::BlankLine,
            walk: WalkConfig::default(),
            train: TrainConfig::default(),
            top_n: DEFAULT_TOP_N,
            max_edges_per_shard: DEFAULT_MAX_EDGES_PER_SHARD,
            lexical: LexicalEmbedderConfig::default(),
            pca_sample_cap: DEFAULT_PCA_SAMPLE_CAP,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.walk.validate()?;
        self.train.validate()?;
        self.lexical.validate()?;
        if self.top_n == 0 || self.max_edges_per_shard == 0 || self.pca_sample_cap == 0 {
            return Err(Error::Config(
                "top_n, max_edges_per_shard and pca_sample_cap must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderInfo {
    Lexical(LexicalEmbedderConfig),
    /// Vectors came from an external encoder; queries need the same file.
    Precomputed { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub manifest: u32,
    pub index: u32,
    pub pca: u32,
    pub store: u32,
}

impl FormatVersions {
    pub fn current() -> Self {
        Self {
            manifest: MANIFEST_VERSION,
            index: INDEX_VERSION,
            pca: PCA_VERSION,
            store: STORE_VERSION,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCounts {
    pub files: usize,
    pub lines: usize,
    pub vocab: usize,
    pub indexed: usize,
    pub edges: usize,
    pub shards: usize,
    pub walks: usize,
    pub pairs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub versions: FormatVersions,
    pub config: PipelineConfig,
    pub encoder: EncoderInfo,
    pub counts: TrainCounts,
    pub final_epoch_loss: Option<f64>,
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if m.versions.manifest != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.versions.manifest
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).at(path)
    }
}

/// Reads a corpus directory and trains a bundle into `out_dir`.
pub fn train_from_dir(
    corpus_dir: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
    encoder: Option<&dyn TextEncoder>,
) -> Result<Manifest> {
    cfg.validate()?;
    let sequences = load_corpus(corpus_dir, &cfg.profile, cfg.separator)?;
    train_from_sequences(&sequences, out_dir, cfg, encoder)
}

/// Trains a bundle from already segmented sequences. `out_dir` must be
/// missing or empty. Without an `encoder` the lexical embedder configured in
/// `cfg` is used.
pub fn train_from_sequences(
    sequences: &[LineSequence],
    out_dir: &Path,
    cfg: &PipelineConfig,
    encoder: Option<&dyn TextEncoder>,
) -> Result<Manifest> {
    cfg.validate()?;
    let lines: usize = sequences.iter().map(LineSequence::line_count).sum();
    if lines == 0 {
        return Err(Error::Input("empty corpus: no code lines retained".into()));
    }
    prepare_out_dir(out_dir)?;

    let vocab = Vocabulary::build(sequences)?;
    let acc = accumulate_edges(sequences, &vocab)?;
    let work = tempfile::Builder::new()
        .prefix("nextline-work-")
        .tempdir()
        .map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let shards = write_edge_shards(&acc, work.path(), cfg.max_edges_per_shard)?;
    let edges = acc.len();
    drop(acc);
    if shards.is_empty() {
        return Err(Error::Training(
            "graph has no edges: every block holds a single distinct line".into(),
        ));
    }
    log::info!(
        "{} files, {lines} lines, {} distinct, {edges} edges in {} shard(s)",
        sequences.len(),
        vocab.len(),
        shards.len()
    );

    let tree = HuffmanTree::build(vocab.freqs())?;
    let mut model: Option<EmbeddingModel> = None;
    let mut counts = TrainCounts {
        files: sequences.len(),
        lines,
        vocab: vocab.len(),
        edges,
        shards: shards.len(),
        ..TrainCounts::default()
    };
    let mut final_loss = None;
    for (i, shard) in shards.iter().enumerate() {
        let adj = AdjacencyView::load(std::slice::from_ref(shard), vocab.len())?;
        let walk_cfg = WalkConfig {
            seed: if i == 0 { cfg.walk.seed } else { walk_seed(cfg.walk.seed, u32::MAX, i) },
            ..cfg.walk
        };
        let walks = drop_singletons(generate_walks(&adj, &walk_cfg)?);
        drop(adj);
        counts.walks += walks.len();
        let (trained, stats) = train_skipgram_hs(&walks, &tree, &cfg.train, model.take())?;
        log::info!(
            "shard {}/{}: {} walks, {} pairs, last epoch loss {:?}",
            i + 1,
            shards.len(),
            walks.len(),
            stats.pairs,
            stats.epoch_loss.last()
        );
        counts.pairs += stats.pairs;
        final_loss = stats.epoch_loss.last().copied().or(final_loss);
        model = Some(trained);
    }
    let model = model.expect("at least one shard was trained");

    let table = extract_embeddings(&model, cfg.top_n);
    drop(model);
    let main = build_index(&table)?;
    drop(table);
    let indexed = main.count();
    counts.indexed = indexed;
    let kept = &vocab.lines()[..indexed];

    let lexical;
    let (encoder, encoder_info): (&dyn TextEncoder, EncoderInfo) = match encoder {
        Some(e) => (e, EncoderInfo::Precomputed { dim: e.dim() }),
        None => {
            lexical = LexicalEmbedder::new(cfg.lexical.clone())?;
            (&lexical, EncoderInfo::Lexical(cfg.lexical.clone()))
        }
    };
    if cfg.train.vector_size > encoder.dim() {
        return Err(Error::Config(format!(
            "embedding dim {} exceeds text encoder dim {}",
            cfg.train.vector_size,
            encoder.dim()
        )));
    }
    let opts = PcaOptions { allow_rank_deficient: true };
    let pca = fit_text_pca(encoder, kept, cfg.train.vector_size, cfg.pca_sample_cap, cfg.train.seed, opts)?;
    let text = build_text_index(encoder, kept, &pca)?;

    main.save(&out_dir.join(MAIN_INDEX_FILE))?;
    text.save(&out_dir.join(TEXT_INDEX_FILE))?;
    pca.save(&out_dir.join(PCA_FILE))?;
    MapStore::put_all(
        &out_dir.join(LINE_TO_ID_DIR),
        &out_dir.join(ID_TO_LINE_DIR),
        kept.iter().enumerate().map(|(id, l)| (l, id as u32)),
    )?;

    let manifest = Manifest {
        generator: format!("nextline {}", env!("CARGO_PKG_VERSION")),
        versions: FormatVersions::current(),
        config: cfg.clone(),
        encoder: encoder_info,
        counts,
        final_epoch_loss: final_loss,
        artifacts: ARTIFACTS.iter().map(|s| s.to_string()).collect(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).at(dir)?;
        if entries.next().is_some() {
            return Err(Error::Input(format!("output directory {} is not empty", dir.display())));
        }
    } else {
        fs::create_dir_all(dir).at(dir)?;
    }
    Ok(())
}

/// Single-token walks carry no context pairs; with several shards most
/// nodes are isolated in any one of them.
fn drop_singletons(walks: WalkCorpus) -> WalkCorpus {
    if walks.iter().all(|w| w.len() > 1) {
        return walks;
    }
    let mut kept = WalkCorpus::default();
    for w in walks.iter().filter(|w| w.len() > 1) {
        kept.push(w);
    }
    kept
}

/// Paths of everything `train_from_sequences` writes, manifest last.
pub fn bundle_paths(dir: &Path) -> Vec<PathBuf> {
    ARTIFACTS
        .iter()
        .chain(std::iter::once(&MANIFEST_FILE))
        .map(|name| dir.join(name))
        .collect()
}
