use std::fs;
use std::path::Path;

use nextline::corpus::{segment_blocks, BlockSeparator, LanguageProfile, LineSequence};
use nextline::embed::TrainConfig;
use nextline::eval::{evaluate_topk, SyntheticSpec, DEFAULT_KS};
use nextline::index::VectorIndex;
use nextline::pipeline::{bundle_paths, train_from_dir, train_from_sequences, PipelineConfig, ARTIFACTS};
use nextline::service::load_bundle;
use nextline::walk::WalkConfig;
use nextline::Error;

const CHAIN: [&str; 5] = [
    "total = 0",
    "for item in items:",
    "total += item.price",
    "average = total / len(items)",
    "return average",
];

fn chain_corpus(repeats: usize) -> Vec<LineSequence> {
    let mut text: Vec<&str> = Vec::new();
    for _ in 0..repeats {
        text.extend(CHAIN);
        text.push("");
    }
    vec![segment_blocks("chain.py", &text, &LanguageProfile::python(), BlockSeparator::BlankLine)]
}

fn quick_config() -> PipelineConfig {
    PipelineConfig {
        train: TrainConfig {
            workers: 1,
            epochs: 20,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    }
}

fn train_chain(dir: &Path) {
    train_from_sequences(&chain_corpus(50), dir, &quick_config(), None).unwrap();
}

#[test]
fn writes_five_artifacts_and_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bundle");
    let manifest = train_from_sequences(&chain_corpus(50), &out, &quick_config(), None).unwrap();
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut expected: Vec<String> = ARTIFACTS.iter().map(|s| s.to_string()).collect();
    expected.push("manifest.json".into());
    expected.sort();
    assert_eq!(names, expected);
    assert!(bundle_paths(&out).iter().all(|p| p.exists()));
    assert_eq!((manifest.counts.vocab, manifest.counts.indexed, manifest.counts.edges), (5, 5, 4));
}

#[test]
fn chain_neighbors_and_self_exclusion() {
    let tmp = tempfile::tempdir().unwrap();
    train_chain(tmp.path());
    let bundle = load_bundle(tmp.path()).unwrap();
    assert_eq!((bundle.vocab_size(), bundle.dim()), (5, 128));

    let resp = bundle.suggest("for item in items:", 3).unwrap();
    assert!(!resp.oov);
    let lines: Vec<&str> = resp.suggestions.iter().map(|s| s.line.as_str()).collect();
    assert!(lines.contains(&"total += item.price"), "{lines:?}");

    for line in CHAIN {
        let resp = bundle.suggest(line, 10).unwrap();
        assert_eq!(resp.suggestions.len(), 4);
        assert!(resp.suggestions.iter().all(|s| s.line != line));
        for (i, s) in resp.suggestions.iter().enumerate() {
            assert_eq!(s.rank, i + 1);
        }
        assert!(resp.suggestions.windows(2).all(|w| w[0].distance <= w[1].distance));
    }
}

#[test]
fn oov_query_goes_through_the_text_index() {
    let tmp = tempfile::tempdir().unwrap();
    train_chain(tmp.path());
    let bundle = load_bundle(tmp.path()).unwrap();
    let resp = bundle.suggest("for item in items: pass", 10).unwrap();
    assert!(resp.oov);
    assert!(!resp.suggestions.is_empty());
    // the proxy is itself excluded, like an in-vocabulary query
    let (proxy, oov) = bundle.resolve("for item in items: pass").unwrap();
    assert!(oov);
    let proxy_line = bundle.store().get_line(proxy).unwrap().unwrap();
    assert!(resp.suggestions.iter().all(|s| s.line != proxy_line));
    // trailing comments and whitespace normalize back into the vocabulary
    assert!(!bundle.suggest("  return average   # done", 3).unwrap().oov);
}

#[test]
fn blank_or_comment_lines_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    train_chain(tmp.path());
    let bundle = load_bundle(tmp.path()).unwrap();
    for raw in ["", "   ", "# only comment"] {
        let err = bundle.suggest(raw, 10).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(err.to_string().contains("nothing to suggest from"));
    }
    assert!(matches!(bundle.suggest("total = 0", 0), Err(Error::Input(_))));
}

#[test]
fn suggestions_are_deterministic_across_loads_and_trainings() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_chain(&a);
    train_chain(&b);
    for f in ["main.index", "text.index", "pca.model"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let x = load_bundle(&a).unwrap().suggest("total = 0", 4).unwrap();
    let y = load_bundle(&a).unwrap().suggest("total = 0", 4).unwrap();
    assert_eq!(x, y);
}

#[test]
fn load_failures() {
    let tmp = tempfile::tempdir().unwrap();
    train_chain(tmp.path());

    let missing = tempfile::tempdir().unwrap();
    for f in ["main.index", "text.index", "manifest.json"] {
        fs::copy(tmp.path().join(f), missing.path().join(f)).unwrap();
    }
    let err = load_bundle(missing.path()).unwrap_err();
    assert!(matches!(err, Error::Load(_)));
    assert!(err.to_string().contains("pca model missing"), "{err}");

    // swap in a text index with one row fewer
    let text = VectorIndex::load(&tmp.path().join("text.index")).unwrap();
    let rows: Vec<f32> = (0..text.count() - 1).flat_map(|i| text.row(i)).collect();
    VectorIndex::from_rows(text.dim(), &rows)
        .unwrap()
        .save(&tmp.path().join("text.index"))
        .unwrap();
    assert!(matches!(load_bundle(tmp.path()), Err(Error::Integrity(_))));

    assert!(matches!(load_bundle(&tmp.path().join("nope")), Err(Error::Load(_))));
}

#[test]
fn empty_and_degenerate_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    fs::create_dir_all(&corpus).unwrap();
    fs::write(corpus.join("only_comments.py"), "# nothing\n\n   # here\n").unwrap();
    let err = train_from_dir(&corpus, &tmp.path().join("out"), &quick_config(), None).unwrap_err();
    assert!(err.to_string().contains("empty corpus"), "{err}");

    let single = vec![segment_blocks("one.py", &["x = 1", "", "y = 2"], &LanguageProfile::python(), BlockSeparator::BlankLine)];
    let err = train_from_sequences(&single, &tmp.path().join("out2"), &quick_config(), None).unwrap_err();
    assert!(matches!(err, Error::Training(_)));

    let busy = tmp.path().join("busy");
    fs::create_dir_all(&busy).unwrap();
    fs::write(busy.join("keep.txt"), "x").unwrap();
    let err = train_from_sequences(&chain_corpus(3), &busy, &quick_config(), None).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
}

#[test]
fn top_n_limits_the_indexed_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        top_n: 3,
        ..quick_config()
    };
    let mut seqs = chain_corpus(50);
    // make the first three chain lines strictly more frequent
    seqs.push(segment_blocks("extra.py", &CHAIN[..3], &LanguageProfile::python(), BlockSeparator::BlankLine));
    let m = train_from_sequences(&seqs, tmp.path(), &cfg, None).unwrap();
    assert_eq!((m.counts.vocab, m.counts.indexed), (5, 3));
    let bundle = load_bundle(tmp.path()).unwrap();
    assert_eq!(bundle.vocab_size(), 3);
    assert!(bundle.suggest("return average", 2).unwrap().oov);
    assert!(!bundle.suggest("total = 0", 2).unwrap().oov);
}

#[test]
fn sharded_training_covers_every_node() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        chains: 6,
        chain_length: 6,
        repeats: 20,
        seed: 2,
    };
    let cfg = PipelineConfig {
        max_edges_per_shard: 7,
        walk: WalkConfig {
            num_walks: 20,
            ..WalkConfig::default()
        },
        ..quick_config()
    };
    let m = train_from_sequences(&spec.sequences().unwrap(), tmp.path(), &cfg, None).unwrap();
    assert_eq!(m.counts.shards, 30usize.div_ceil(7));
    let bundle = load_bundle(tmp.path()).unwrap();
    let report = evaluate_topk(&bundle, &spec.sequences().unwrap(), &DEFAULT_KS).unwrap();
    assert!(report.is_nested());
    assert_eq!(report.transitions_evaluated, 6 * 5 * 20);
}

#[test]
fn evaluation_on_a_small_chain_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        chains: 20,
        chain_length: 10,
        repeats: 50,
        seed: 7,
    };
    let seqs = spec.sequences().unwrap();
    train_from_sequences(&seqs, tmp.path(), &quick_config(), None).unwrap();
    let bundle = load_bundle(tmp.path()).unwrap();
    let report = evaluate_topk(&bundle, &seqs, &DEFAULT_KS).unwrap();
    assert!(report.is_nested());
    assert_eq!(report.oov_transitions_skipped, 0);
    assert!(report.accuracy(10).unwrap() >= 0.95, "{report:?}");

    // a corpus the bundle has never seen has nothing to evaluate
    let foreign = vec![segment_blocks("f.py", &["zz = 1", "qq = 2"], &LanguageProfile::python(), BlockSeparator::None)];
    let err = evaluate_topk(&bundle, &foreign, &DEFAULT_KS).unwrap_err();
    assert!(matches!(err, Error::Eval(_)));
    assert_eq!(report, evaluate_topk(&bundle, &seqs, &DEFAULT_KS).unwrap());
}
