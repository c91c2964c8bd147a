//! Top-k accuracy over corpus transitions, synthetic corpora, and the
//! artifact-size / memory / latency scaling benchmark.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{LineSequence, NormalizedLine};
use crate::error::{Error, IoContext, Result};
use crate::graph::NodeId;
use crate::pipeline::{train_from_sequences, PipelineConfig};
use crate::service::{load_bundle, ArtifactBundle};

pub const DEFAULT_KS: [usize; 3] = [1, 3, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub hits: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub transitions_evaluated: usize,
    /// Pairs where either side is not an indexed line.
    pub oov_transitions_skipped: usize,
    /// Pairs `(a, a)`: a line can never be suggested for itself.
    pub self_transitions_skipped: usize,
    pub topk: Vec<TopK>,
}

impl EvalReport {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }

    /// Accuracies never decrease as k grows.
    pub fn is_nested(&self) -> bool {
        let mut sorted: Vec<&TopK> = self.topk.iter().collect();
        sorted.sort_by_key(|t| t.k);
        sorted.windows(2).all(|w| w[0].hits <= w[1].hits)
    }
}

fn cached_id<'a>(
    bundle: &ArtifactBundle,
    cache: &mut HashMap<&'a str, Option<NodeId>>,
    line: &'a NormalizedLine,
) -> Result<Option<NodeId>> {
    if let Some(&id) = cache.get(line.as_str()) {
        return Ok(id);
    }
    let id = bundle.lookup(line.as_str())?;
    cache.insert(line.as_str(), id);
    Ok(id)
}

/// For every adjacent in-block pair `(a, b)` with both lines indexed, checks
/// whether `b` is among the top `k` suggestions for `a`.
pub fn evaluate_topk(bundle: &ArtifactBundle, sequences: &[LineSequence], ks: &[usize]) -> Result<EvalReport> {
    let kmax = ks.iter().copied().max().filter(|&k| k > 0).ok_or_else(|| Error::Config("ks must be non-empty and positive".into()))?;

    let mut ids: HashMap<&str, Option<NodeId>> = HashMap::new();
    let mut pairs: Vec<(NodeId, NodeId)> = Vec::new();
    let (mut oov, mut selfs) = (0, 0);
    for seq in sequences {
        for (a, b) in seq.transitions() {
            let x = cached_id(bundle, &mut ids, a)?;
            let y = cached_id(bundle, &mut ids, b)?;
            match (x, y) {
                (Some(x), Some(y)) if x == y => selfs += 1,
                (Some(x), Some(y)) => pairs.push((x, y)),
                _ => oov += 1,
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Eval(format!(
            "no evaluable transitions ({oov} skipped as out of vocabulary, {selfs} self-transitions)"
        )));
    }

    let mut sources: Vec<NodeId> = pairs.iter().map(|p| p.0).collect();
    sources.sort_unstable();
    sources.dedup();
    let ranked: HashMap<NodeId, Vec<NodeId>> = sources
        .par_iter()
        .map(|&a| {
            let ids = bundle.neighbors_ids(a, kmax)?;
            Ok((a, ids))
        })
        .collect::<Result<_>>()?;

    let mut ks_sorted: Vec<usize> = ks.to_vec();
    ks_sorted.sort_unstable();
    ks_sorted.dedup();
    let mut hits = vec![0usize; ks_sorted.len()];
    for (a, b) in &pairs {
        if let Some(pos) = ranked[a].iter().position(|x| x == b) {
            for (h, &k) in hits.iter_mut().zip(&ks_sorted) {
                if pos < k {
                    *h += 1;
                }
            }
        }
    }
    let n = pairs.len();
    Ok(EvalReport {
        transitions_evaluated: n,
        oov_transitions_skipped: oov,
        self_transitions_skipped: selfs,
        topk: ks_sorted
            .iter()
            .zip(hits)
            .map(|(&k, hits)| TopK {
                k,
                hits,
                accuracy: hits as f64 / n as f64,
            })
            .collect(),
    })
}

/// Disjoint chains of distinct lines, each chain one file whose single block
/// is repeated `repeats` times (blocks separated by blank lines). Line text
/// is drawn from a seeded generator so lengths and tokens vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub chains: usize,
    pub chain_length: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Enough chains of `chain_length` for a vocabulary of `vocab_size` lines.
    pub fn for_vocab(vocab_size: usize, chain_length: usize, repeats: usize, seed: u64) -> Self {
        Self {
            chains: vocab_size.div_ceil(chain_length.max(1)),
            chain_length,
            repeats,
            seed,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.chains * self.chain_length
    }

    fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.chain_length < 2 || self.repeats == 0 {
            return Err(Error::Config("synthetic corpus needs chains >= 1, chain_length >= 2, repeats >= 1".into()));
        }
        Ok(())
    }

    fn chain_lines(&self, chain: usize) -> Vec<String> {
        const NAMES: [&str; 8] = ["total", "value", "node", "result", "count", "left", "right", "buf"];
        const CALLS: [&str; 8] = ["compute", "merge", "update", "len", "max", "min", "sorted", "append"];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (chain as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (0..self.chain_length)
            .map(|step| {
                let name = NAMES[rng.gen_range(0..NAMES.len())];
                let call = CALLS[rng.gen_range(0..CALLS.len())];
                let args = rng.gen_range(1..4);
                let mut line = format!("{name}_{chain}_{step} = {call}(");
                for a in 0..args {
                    if a > 0 {
                        line.push_str(", ");
                    }
                    line.push_str(&format!("x{}", rng.gen_range(0..100)));
                }
                line.push(')');
                line
            })
            .collect()
    }

    /// Sequences ready for training.
    pub fn sequences(&self) -> Result<Vec<LineSequence>> {
        self.validate()?;
        Ok((0..self.chains)
            .map(|c| {
                let block: Vec<NormalizedLine> = self
                    .chain_lines(c)
                    .into_iter()
                    .map(|l| NormalizedLine::from_canonical(l).expect("generated lines are canonical"))
                    .collect();
                LineSequence {
                    source_path: PathBuf::from(format!("chain_{c:06}.py")),
                    blocks: vec![block; self.repeats],
                }
            })
            .collect())
    }

    /// Writes the same corpus as `.py` files under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).at(dir)?;
        for c in 0..self.chains {
            let block = self.chain_lines(c).join("\n");
            let text = vec![block; self.repeats].join("\n\n") + "\n";
            let path = dir.join(format!("chain_{c:06}.py"));
            fs::write(&path, text).at(&path)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub vocab_size: usize,
    pub artifact_bytes: u64,
    pub peak_resident_bytes: u64,
    pub mean_query_seconds: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub generator: SyntheticSpec,
    pub config: PipelineConfig,
    pub rows: Vec<ScalingRow>,
}

/// Current resident set size of this process, from `/proc/self/status`.
pub fn resident_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Polls resident memory on a background thread until dropped.
pub struct RssSampler {
    peak: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl RssSampler {
    pub fn start(interval: Duration) -> Result<Self> {
        let first = resident_bytes().ok_or_else(|| Error::Bench {
            vocab_size: 0,
            source: Box::new(Error::Internal("resident memory is not readable on this platform".into())),
        })?;
        let peak = Arc::new(AtomicU64::new(first));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let (peak, stop) = (peak.clone(), stop.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    if let Some(rss) = resident_bytes() {
                        peak.fetch_max(rss, Ordering::Relaxed);
                    }
                    std::thread::sleep(interval);
                }
            })
        };
        Ok(Self {
            peak,
            stop,
            handle: Some(handle),
        })
    }

    /// Stops polling, takes one last sample and returns the peak.
    pub fn finish(mut self) -> u64 {
        self.shutdown();
        if let Some(rss) = resident_bytes() {
            self.peak.fetch_max(rss, Ordering::Relaxed);
        }
        self.peak.load(Ordering::Relaxed)
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RssSampler {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Mean wall time of `suggest(line, 10)` over `queries` in-vocabulary lines
/// picked with `seed`, run one after another on the calling thread.
pub fn measure_latency(bundle: &ArtifactBundle, queries: usize, seed: u64) -> Result<f64> {
    if queries == 0 {
        return Err(Error::Config("need at least one query".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = bundle.vocab_size() as u32;
    let mut lines = Vec::with_capacity(queries);
    for _ in 0..queries {
        let id = rng.gen_range(0..n);
        let line = bundle
            .store()
            .get_line(id)?
            .ok_or_else(|| Error::Integrity(format!("id {id} has no line")))?;
        lines.push(line);
    }
    let start = Instant::now();
    for line in &lines {
        std::hint::black_box(bundle.suggest(line, 10)?);
    }
    Ok(start.elapsed().as_secs_f64() / queries as f64)
}

/// Trains one bundle per vocabulary size under `work_dir/v<size>` and
/// measures it. Bundles are removed afterwards unless `keep` is set.
pub fn bench_scaling(
    vocab_sizes: &[usize],
    template: SyntheticSpec,
    cfg: &PipelineConfig,
    queries: usize,
    work_dir: &Path,
    keep: bool,
) -> Result<ScalingReport> {
    if vocab_sizes.is_empty() || vocab_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("vocab sizes must be non-empty and strictly ascending".into()));
    }
    let mut rows = Vec::with_capacity(vocab_sizes.len());
    for &v in vocab_sizes {
        let wrap = |e: Error| Error::Bench {
            vocab_size: v,
            source: Box::new(e),
        };
        let spec = SyntheticSpec::for_vocab(v, template.chain_length, template.repeats, template.seed);
        let out = work_dir.join(format!("v{v}"));
        let row = (|| {
            let sequences = spec.sequences()?;
            train_from_sequences(&sequences, &out, cfg, None)?;
            drop(sequences);
            let sampler = RssSampler::start(Duration::from_millis(50))?;
            let bundle = load_bundle(&out)?;
            let stats = bundle.stats()?;
            let mean = measure_latency(&bundle, queries, template.seed)?;
            drop(bundle);
            Ok(ScalingRow {
                vocab_size: spec.vocab_size(),
                artifact_bytes: stats.artifact_bytes,
                peak_resident_bytes: sampler.finish(),
                mean_query_seconds: mean,
                queries,
            })
        })()
        .map_err(wrap)?;
        log::info!("scaling row {row:?}");
        rows.push(row);
        if !keep {
            fs::remove_dir_all(&out).at(&out)?;
        }
    }
    Ok(ScalingReport {
        generator: template,
        config: cfg.clone(),
        rows,
    })
}

/// Least-squares line `y = a + b x`; returns `(a, b, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Some((a, b, r2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Rows and headers for CSV output.
pub trait CsvRows {
    fn write_csv<W: Write>(&self, w: &mut csv::Writer<W>) -> csv::Result<()>;
}

impl CsvRows for EvalReport {
    fn write_csv<W: Write>(&self, w: &mut csv::Writer<W>) -> csv::Result<()> {
        w.write_record(["k", "hits", "transitions_evaluated", "accuracy", "oov_transitions_skipped"])?;
        for t in &self.topk {
            w.write_record([
                t.k.to_string(),
                t.hits.to_string(),
                self.transitions_evaluated.to_string(),
                format!("{:.6}", t.accuracy),
                self.oov_transitions_skipped.to_string(),
            ])?;
        }
        Ok(())
    }
}

impl CsvRows for ScalingReport {
    fn write_csv<W: Write>(&self, w: &mut csv::Writer<W>) -> csv::Result<()> {
        w.write_record(["vocab_size", "artifact_bytes", "peak_resident_bytes", "mean_query_seconds", "queries"])?;
        for r in &self.rows {
            w.write_record([
                r.vocab_size.to_string(),
                r.artifact_bytes.to_string(),
                r.peak_resident_bytes.to_string(),
                format!("{:.9}", r.mean_query_seconds),
                r.queries.to_string(),
            ])?;
        }
        Ok(())
    }
}

pub fn render_report<R: Serialize + CsvRows>(report: &R, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Internal(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            report.write_csv(&mut w).map_err(|e| Error::Internal(e.to_string()))?;
            let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
        }
    }
}

pub fn emit_report<R: Serialize + CsvRows>(report: &R, format: ReportFormat, path: &Path) -> Result<()> {
    fs::write(path, render_report(report, format)?).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_exact_and_noisy() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let (a, b, r2) = linear_fit(&xs, &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        // hand-computed: sxx = 5, sxy = 3.5, syy = 2.75, so r^2 = 3.5^2 / (5 * 2.75)
        let (a, b, r2) = linear_fit(&[0.0, 1.0, 2.0, 3.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        assert!((a - 0.7).abs() < 1e-12 && (b - 0.7).abs() < 1e-12);
        assert!((r2 - 49.0 / 55.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn synthetic_corpus_shape() {
        let spec = SyntheticSpec {
            chains: 7,
            chain_length: 10,
            repeats: 3,
            seed: 5,
        };
        let seqs = spec.sequences().unwrap();
        assert_eq!(seqs.len(), 7);
        assert!(seqs.iter().all(|s| s.blocks.len() == 3 && s.blocks[0].len() == 10));
        let mut all: Vec<&str> = seqs.iter().flat_map(|s| s.blocks[0].iter().map(|l| l.as_str())).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), spec.vocab_size());
        assert_eq!(spec.sequences().unwrap(), seqs);
        assert_eq!(SyntheticSpec::for_vocab(25_000, 10, 2, 0).vocab_size(), 25_000);
    }

    #[test]
    fn rss_is_readable() {
        let r = resident_bytes().unwrap();
        assert!(r > 0);
        let s = RssSampler::start(Duration::from_millis(10)).unwrap();
        let v = vec![1u8; 32 << 20];
        std::thread::sleep(Duration::from_millis(60));
        let peak = s.finish();
        assert!(peak >= r);
        drop(v);
    }

    #[test]
    fn report_rendering() {
        let r = EvalReport {
            transitions_evaluated: 4,
            oov_transitions_skipped: 1,
            self_transitions_skipped: 0,
            topk: vec![
                TopK { k: 1, hits: 1, accuracy: 0.25 },
                TopK { k: 3, hits: 3, accuracy: 0.75 },
            ],
        };
        let json = render_report(&r, ReportFormat::Json).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
        assert_eq!(json, render_report(&r, ReportFormat::Json).unwrap());
        let csv = render_report(&r, ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "k,hits,transitions_evaluated,accuracy,oov_transitions_skipped");
        assert_eq!(csv.lines().nth(2).unwrap(), "3,3,4,0.750000,1");
        assert!(r.is_nested());
    }
}
