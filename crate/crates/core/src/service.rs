//! Loading a trained bundle and answering next-line queries.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_line, LanguageProfile};
use crate::error::{Error, Result};
use crate::fallback::{resolve_oov, LexicalEmbedder, LexicalEmbedderConfig, TextEncoder};
use crate::graph::NodeId;
use crate::index::{QueryResult, VectorIndex};
use crate::mapstore::MapStore;
use crate::pipeline::{
    EncoderInfo, Manifest, ID_TO_LINE_DIR, LINE_TO_ID_DIR, MAIN_INDEX_FILE, MANIFEST_FILE, PCA_FILE, TEXT_INDEX_FILE,
};
use crate::PcaModel;

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub line: String,
    /// Squared L2 distance between the query's graph vector and this line's.
    pub distance: f32,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestResponse {
    pub oov: bool,
    pub suggestions: Vec<Suggestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleStats {
    pub vocab: usize,
    pub dim: usize,
    pub artifact_bytes: u64,
    pub main_index_bytes: u64,
    pub text_index_bytes: u64,
    pub pca_bytes: u64,
    pub line_to_id_bytes: u64,
    pub id_to_line_bytes: u64,
}

/// The five inference artifacts, cross-checked and read-only.
pub struct ArtifactBundle {
    dir: PathBuf,
    main: VectorIndex,
    text: VectorIndex,
    pca: PcaModel,
    store: MapStore,
    encoder: Box<dyn TextEncoder>,
    profile: LanguageProfile,
    manifest: Option<Manifest>,
}

impl std::fmt::Debug for ArtifactBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ArtifactBundle")
            .field("dir", &self.dir)
            .field("vocab", &self.main.count())
            .field("dim", &self.main.dim())
            .finish_non_exhaustive()
    }
}

fn require(dir: &Path, name: &str, what: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Load(format!("{what} missing ({})", path.display())))
    }
}

/// Loads a bundle trained with the lexical encoder.
pub fn load_bundle(dir: &Path) -> Result<ArtifactBundle> {
    load_bundle_with(dir, None)
}

/// Loads a bundle, querying OOV lines through `encoder` when given. A bundle
/// whose manifest records precomputed text vectors requires one.
pub fn load_bundle_with(dir: &Path, encoder: Option<Box<dyn TextEncoder>>) -> Result<ArtifactBundle> {
    if !dir.is_dir() {
        return Err(Error::Load(format!("artifact directory {} not found", dir.display())));
    }
    let main_path = require(dir, MAIN_INDEX_FILE, "main index")?;
    let text_path = require(dir, TEXT_INDEX_FILE, "text index")?;
    let pca_path = require(dir, PCA_FILE, "pca model")?;
    let l2i = require(dir, LINE_TO_ID_DIR, "line-to-id store")?;
    let i2l = require(dir, ID_TO_LINE_DIR, "id-to-line store")?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        Some(Manifest::load(&manifest_path)?)
    } else {
        None
    };

    let main = VectorIndex::load(&main_path)?;
    let text = VectorIndex::load(&text_path)?;
    let pca = PcaModel::load(&pca_path)?;
    let store = MapStore::open(&l2i, &i2l)?;

    let encoder: Box<dyn TextEncoder> = match (encoder, manifest.as_ref().map(|m| &m.encoder)) {
        (Some(e), _) => e,
        (None, Some(EncoderInfo::Precomputed { .. })) => {
            return Err(Error::Load(
                "bundle was trained on precomputed text embeddings; supply the same embeddings file".into(),
            ))
        }
        (None, Some(EncoderInfo::Lexical(cfg))) => Box::new(LexicalEmbedder::new(cfg.clone())?),
        (None, None) => Box::new(LexicalEmbedder::new(LexicalEmbedderConfig::default())?),
    };
    let profile = manifest.as_ref().map_or_else(LanguageProfile::python, |m| m.config.profile.clone());

    let n = main.count();
    if text.count() != n {
        return Err(Error::Integrity(format!("text index has {} rows, main index {n}", text.count())));
    }
    for (what, len) in [("line-to-id", store.line_to_id.table().len()), ("id-to-line", store.id_to_line.table().len())] {
        if len != n as u64 {
            return Err(Error::Integrity(format!("{what} store has {len} entries, main index {n}")));
        }
    }
    if text.dim() != main.dim() || pca.out_dim() != text.dim() {
        return Err(Error::Integrity(format!(
            "dimension mismatch: main index {}, text index {}, pca output {}",
            main.dim(),
            text.dim(),
            pca.out_dim()
        )));
    }
    if pca.in_dim() != encoder.dim() {
        return Err(Error::Integrity(format!(
            "pca input width {} does not match text encoder width {}",
            pca.in_dim(),
            encoder.dim()
        )));
    }
    if let Some(m) = &manifest {
        if m.counts.indexed != n {
            return Err(Error::Integrity(format!("manifest lists {} indexed lines, found {n}", m.counts.indexed)));
        }
    }
    Ok(ArtifactBundle {
        dir: dir.to_path_buf(),
        main,
        text,
        pca,
        store,
        encoder,
        profile,
        manifest,
    })
}

impl ArtifactBundle {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn vocab_size(&self) -> usize {
        self.main.count()
    }

    pub fn dim(&self) -> usize {
        self.main.dim()
    }

    pub fn manifest(&self) -> Option<&Manifest> {
        self.manifest.as_ref()
    }

    pub fn profile(&self) -> &LanguageProfile {
        &self.profile
    }

    pub fn main_index(&self) -> &VectorIndex {
        &self.main
    }

    pub fn store(&self) -> &MapStore {
        &self.store
    }

    pub fn stats(&self) -> Result<BundleStats> {
        let file_len = |name: &str| -> Result<u64> {
            let p = self.dir.join(name);
            fs::metadata(&p).map(|m| m.len()).map_err(|e| Error::io(p, e))
        };
        let main_index_bytes = file_len(MAIN_INDEX_FILE)?;
        let text_index_bytes = file_len(TEXT_INDEX_FILE)?;
        let pca_bytes = file_len(PCA_FILE)?;
        let line_to_id_bytes = self.store.line_to_id.table().file_bytes()?;
        let id_to_line_bytes = self.store.id_to_line.table().file_bytes()?;
        Ok(BundleStats {
            vocab: self.vocab_size(),
            dim: self.dim(),
            artifact_bytes: main_index_bytes + text_index_bytes + pca_bytes + line_to_id_bytes + id_to_line_bytes,
            main_index_bytes,
            text_index_bytes,
            pca_bytes,
            line_to_id_bytes,
            id_to_line_bytes,
        })
    }

    /// Vocabulary id of an already normalized line, if indexed.
    pub fn lookup(&self, line: &str) -> Result<Option<NodeId>> {
        Ok(self.store.get_id(line)?.filter(|&id| (id as usize) < self.main.count()))
    }

    /// The id whose graph vector answers `line`: its own, or for an unknown
    /// line the textually closest known one. The flag is true in the
    /// second case.
    pub fn resolve(&self, line: &str) -> Result<(NodeId, bool)> {
        match self.lookup(line)? {
            Some(id) => Ok((id, false)),
            None => Ok((resolve_oov(line, self.encoder.as_ref(), &self.pca, &self.text)?, true)),
        }
    }

    fn ranked(&self, id: NodeId, k: usize) -> Result<Vec<QueryResult>> {
        if k == 0 {
            return Err(Error::Input("k must be at least 1".into()));
        }
        let query = self.main.row(id as usize);
        let mut hits = self.main.search(&query, k.saturating_add(1))?;
        hits.retain(|h| h.id != id);
        hits.truncate(k);
        Ok(hits)
    }

    /// Ids of the `k` nearest neighbors of `id`, excluding `id` itself.
    pub fn neighbors_ids(&self, id: NodeId, k: usize) -> Result<Vec<NodeId>> {
        Ok(self.ranked(id, k)?.into_iter().map(|h| h.id).collect())
    }

    /// Nearest neighbors of `id` in the main index, excluding `id` itself.
    pub fn neighbors(&self, id: NodeId, k: usize) -> Result<Vec<Suggestion>> {
        self.ranked(id, k)?
            .into_iter()
            .enumerate()
            .map(|(i, h)| {
                let line = self
                    .store
                    .get_line(h.id)?
                    .ok_or_else(|| Error::Integrity(format!("id {} has no line", h.id)))?;
                Ok(Suggestion {
                    line,
                    distance: h.distance,
                    rank: i + 1,
                })
            })
            .collect()
    }

    /// Normalizes `raw_line` and returns up to `k` candidate next lines.
    pub fn suggest(&self, raw_line: &str, k: usize) -> Result<SuggestResponse> {
        if k == 0 {
            return Err(Error::Input("k must be at least 1".into()));
        }
        let line = normalize_line(raw_line, &self.profile)
            .ok_or_else(|| Error::Input("nothing to suggest from: line is blank or only a comment".into()))?;
        let (id, oov) = self.resolve(line.as_str())?;
        Ok(SuggestResponse {
            oov,
            suggestions: self.neighbors(id, k)?,
        })
    }
}
