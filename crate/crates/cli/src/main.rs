use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nextline::corpus::{holdout_split, read_sources, scan_corpus, BlockSeparator};
use nextline::embed::TrainConfig;
use nextline::eval::{bench_scaling, evaluate_topk, linear_fit, render_report, ReportFormat, SyntheticSpec, DEFAULT_KS};
use nextline::fallback::{PrecomputedEmbeddings, TextEncoder};
use nextline::pipeline::{train_from_sequences, PipelineConfig, DEFAULT_TOP_N};
use nextline::service::{load_bundle_with, ArtifactBundle};
use nextline::walk::WalkConfig;

const HOLDOUT_FRACTION: f64 = 0.1;

#[derive(Parser)]
#[command(name = "nextline", version, about = "Next-line code suggestions from line-transition graph embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an artifact bundle from a directory of source files.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on the 90% file split only, leaving 10% for `eval --holdout`.
        #[arg(long)]
        holdout: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Print suggestions for one line.
    Suggest {
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        line: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Print the JSON response instead of a table.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        text_embeddings: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        text_embeddings: Option<PathBuf>,
    },
    /// Top-k accuracy of a bundle over a corpus's transitions.
    Eval {
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Evaluate on the 10% file split a `train --holdout` run left out.
        #[arg(long)]
        holdout: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "blank", value_parser = parse_separator)]
        separator: BlockSeparator,
        #[arg(long, default_value = "json", value_parser = parse_format)]
        format: ReportFormat,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        text_embeddings: Option<PathBuf>,
    },
    /// Train bundles on synthetic chain corpora of growing size and measure
    /// artifact bytes, resident memory and query latency.
    Bench {
        /// Working directory for the per-size bundles.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [25_000, 50_000, 100_000, 200_000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 10)]
        chain_length: usize,
        #[arg(long, default_value_t = 2)]
        repeats: usize,
        #[arg(long)]
        keep: bool,
        #[arg(long, default_value = "json", value_parser = parse_format)]
        format: ReportFormat,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    #[arg(long, default_value_t = 0.5)]
    q: f64,
    #[arg(long, default_value_t = 10)]
    num_walks: usize,
    #[arg(long, default_value_t = 10)]
    walk_length: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    top_n: usize,
    /// Maximum edges per shard file.
    #[arg(long, default_value_t = nextline::graph::DEFAULT_MAX_EDGES_PER_SHARD)]
    shard_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Training threads; 1 gives bit-for-bit reproducible models.
    #[arg(long)]
    workers: Option<usize>,
    /// Blank-line separated blocks (`blank`) or whole files (`none`).
    #[arg(long, default_value = "blank", value_parser = parse_separator)]
    separator: BlockSeparator,
    /// JSON-lines file of precomputed text embeddings to use instead of the
    /// built-in lexical encoder.
    #[arg(long)]
    text_embeddings: Option<PathBuf>,
}

impl TrainArgs {
    fn config(&self) -> PipelineConfig {
        let defaults = TrainConfig::default();
        PipelineConfig {
            separator: self.separator,
            walk: WalkConfig {
                p: self.p,
                q: self.q,
                num_walks: self.num_walks,
                walk_length: self.walk_length,
                seed: self.seed,
            },
            train: TrainConfig {
                vector_size: self.dim,
                window: self.window,
                epochs: self.epochs,
                seed: self.seed,
                workers: self.workers.unwrap_or(defaults.workers),
                ..defaults
            },
            top_n: self.top_n,
            max_edges_per_shard: self.shard_size,
            ..PipelineConfig::default()
        }
    }
}

fn parse_separator(s: &str) -> Result<BlockSeparator, String> {
    s.parse().map_err(|e: nextline::Error| e.to_string())
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: nextline::Error| e.to_string())
}

fn load_encoder(path: Option<&Path>) -> Result<Option<Box<dyn TextEncoder>>> {
    path.map(|p| {
        PrecomputedEmbeddings::load(p)
            .map(|e| Box::new(e) as Box<dyn TextEncoder>)
            .with_context(|| format!("loading text embeddings {}", p.display()))
    })
    .transpose()
}

fn open_bundle(dir: &Path, text_embeddings: Option<&Path>) -> Result<ArtifactBundle> {
    let encoder = load_encoder(text_embeddings)?;
    load_bundle_with(dir, encoder).with_context(|| format!("loading artifacts from {}", dir.display()))
}

fn corpus_files(corpus: &Path, holdout: bool, seed: u64, want_holdout: bool) -> Result<Vec<PathBuf>> {
    let profile = nextline::corpus::LanguageProfile::python();
    let files = scan_corpus(corpus, &profile)?;
    if !holdout {
        return Ok(files);
    }
    let (train, held) = holdout_split(&files, HOLDOUT_FRACTION, seed);
    Ok(if want_holdout { held } else { train })
}

fn write_output(text: &str, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(out.write_all(text.as_bytes())?),
    }
}

/// Runs one command, writing its normal output to `out`.
fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train {
            corpus,
            out: dir,
            holdout,
            train,
        } => {
            let cfg = train.config();
            let files = corpus_files(&corpus, holdout, train.seed, false)?;
            let sequences = read_sources(&files, &cfg.profile, cfg.separator)?;
            let encoder = load_encoder(train.text_embeddings.as_deref())?;
            let manifest = train_from_sequences(&sequences, &dir, &cfg, encoder.as_deref())?;
            let c = &manifest.counts;
            writeln!(
                out,
                "trained {} files, {} lines, {} distinct ({} indexed), {} edges -> {}",
                c.files,
                c.lines,
                c.vocab,
                c.indexed,
                c.edges,
                dir.display()
            )?;
        }
        Command::Suggest {
            artifacts,
            line,
            k,
            json,
            text_embeddings,
        } => {
            let bundle = open_bundle(&artifacts, text_embeddings.as_deref())?;
            let resp = bundle.suggest(&line, k)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&resp)?)?;
            } else {
                if resp.oov {
                    eprintln!("note: line not in vocabulary, answered via the closest known line");
                }
                for s in &resp.suggestions {
                    writeln!(out, "{}\t{:.6}\t{}", s.rank, s.distance, s.line)?;
                }
            }
        }
        Command::Serve {
            artifacts,
            host,
            port,
            text_embeddings,
        } => {
            let bundle = Arc::new(open_bundle(&artifacts, text_embeddings.as_deref())?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(nextline_cli::serve(bundle, &format!("{host}:{port}")))?;
        }
        Command::Eval {
            artifacts,
            corpus,
            holdout,
            seed,
            separator,
            format,
            report,
            text_embeddings,
        } => {
            let bundle = open_bundle(&artifacts, text_embeddings.as_deref())?;
            let files = corpus_files(&corpus, holdout, seed, true)?;
            if files.is_empty() {
                bail!("no source files to evaluate under {}", corpus.display());
            }
            let sequences = read_sources(&files, bundle.profile(), separator)?;
            let r = evaluate_topk(&bundle, &sequences, &DEFAULT_KS)?;
            write_output(&render_report(&r, format)?, report.as_deref(), out)?;
        }
        Command::Bench {
            out: work_dir,
            sizes,
            queries,
            chain_length,
            repeats,
            keep,
            format,
            report,
            train,
        } => {
            let cfg = train.config();
            let template = SyntheticSpec {
                chains: 0,
                chain_length,
                repeats,
                seed: train.seed,
            };
            let r = bench_scaling(&sizes, template, &cfg, queries, &work_dir, keep)?;
            let xs: Vec<f64> = r.rows.iter().map(|row| row.vocab_size as f64).collect();
            let ys: Vec<f64> = r.rows.iter().map(|row| row.artifact_bytes as f64).collect();
            if let Some((_, slope, r2)) = linear_fit(&xs, &ys) {
                eprintln!("artifact bytes per line {slope:.1}, R^2 {r2:.5}");
            }
            write_output(&render_report(&r, format)?, report.as_deref(), out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse(), &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nextline(args: &[&str], paths: &[(&str, &Path)]) -> Result<String> {
        let mut argv: Vec<std::ffi::OsString> = vec!["nextline".into()];
        argv.extend(args.iter().map(Into::into));
        for (flag, p) in paths {
            argv.push(flag.into());
            argv.push(p.into());
        }
        let mut out = Vec::new();
        run(Cli::try_parse_from(argv)?, &mut out)?;
        Ok(String::from_utf8(out)?)
    }

    fn smoke_corpus(dir: &Path) -> SyntheticSpec {
        let spec = SyntheticSpec {
            chains: 10,
            chain_length: 6,
            repeats: 10,
            seed: 5,
        };
        spec.write_to(dir).unwrap();
        spec
    }

    #[test]
    fn train_suggest_and_eval() {
        let tmp = tempfile::tempdir().unwrap();
        let (corpus, out) = (tmp.path().join("corpus"), tmp.path().join("out"));
        let spec = smoke_corpus(&corpus);

        let o = nextline(
            &["train", "--epochs", "10", "--workers", "1"],
            &[("--corpus", &corpus), ("--out", &out)],
        )
        .unwrap();
        assert!(o.contains("60 distinct (60 indexed)"), "{o}");

        let first = spec.sequences().unwrap()[0].lines().next().unwrap().as_str().to_string();
        let o = nextline(&["suggest", "--k", "3", "--line", &first], &[("--artifacts", &out)]).unwrap();
        let rows: Vec<Vec<&str>> = o.lines().map(|l| l.splitn(3, '\t').collect()).collect();
        assert_eq!(rows.len(), 3);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r[0], (i + 1).to_string());
            assert!(r[1].parse::<f32>().unwrap() >= 0.0);
            assert_ne!(r[2], first);
        }

        let o = nextline(&["suggest", "--json", "--line", "never_seen = 1"], &[("--artifacts", &out)]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&o).unwrap();
        assert_eq!(v["oov"], true);

        let o = nextline(&["eval"], &[("--artifacts", &out), ("--corpus", &corpus)]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&o).unwrap();
        assert_eq!(v["transitions_evaluated"], 10 * 5 * 10);
        assert_eq!(v["topk"].as_array().unwrap().len(), 3);

        let report = tmp.path().join("eval.csv");
        let o = nextline(
            &["eval", "--format", "csv"],
            &[("--artifacts", &out), ("--corpus", &corpus), ("--report", &report)],
        )
        .unwrap();
        assert!(o.is_empty());
        assert!(std::fs::read_to_string(&report).unwrap().lines().count() >= 2);
    }

    #[test]
    fn user_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let empty = tmp.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        let err = nextline(&["train"], &[("--corpus", &empty), ("--out", &tmp.path().join("out"))]).unwrap_err();
        assert!(format!("{err:#}").contains("empty corpus"), "{err:#}");

        let err = nextline(&["suggest", "--line", "x = 1"], &[("--artifacts", &tmp.path().join("missing"))]).unwrap_err();
        assert!(format!("{err:#}").contains("not found"), "{err:#}");

        let err = nextline(&["train", "--separator", "paragraph"], &[("--corpus", &empty), ("--out", &empty)]).unwrap_err();
        assert!(err.downcast_ref::<clap::Error>().is_some(), "{err:#}");
    }

    #[test]
    fn bench_at_small_sizes() {
        let tmp = tempfile::tempdir().unwrap();
        let o = nextline(
            &[
                "bench", "--sizes", "200,400", "--queries", "20", "--epochs", "1", "--num-walks", "1", "--walk-length",
                "5", "--workers", "1",
            ],
            &[("--out", tmp.path())],
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&o).unwrap();
        let rows = v["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0]["vocab_size"], 200);
        assert!(rows[1]["artifact_bytes"].as_u64() > rows[0]["artifact_bytes"].as_u64());
    }
}
