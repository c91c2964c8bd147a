//! Corpus ingestion: discovering source files and reducing them to blocks of
//! canonical code lines.
//!
//! A canonical line is the source line with any trailing comment removed and
//! surrounding whitespace trimmed. Comment detection is a single-line
//! quote-state scanner: string state is never carried from one line to the
//! next, and an unterminated string swallows the rest of its line.

use std::borrow::Cow;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, IoContext, Result};

/// What counts as a comment, a string, and a source file for one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageProfile {
    pub line_comment_marker: String,
    pub string_delimiters: Vec<String>,
    pub file_extensions: Vec<String>,
}

impl Default for LanguageProfile {
    fn default() -> Self {
        Self::python()
    }
}

impl LanguageProfile {
    pub fn python() -> Self {
        Self {
            line_comment_marker: "#".into(),
            string_delimiters: vec!["'".into(), "\"".into(), "'''".into(), "\"\"\"".into()],
            file_extensions: vec![".py".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.line_comment_marker.is_empty() {
            return Err(Error::Config("line comment marker must be non-empty".into()));
        }
        if self.file_extensions.is_empty() {
            return Err(Error::Config("at least one file extension is required".into()));
        }
        if self.string_delimiters.iter().any(|d| d.is_empty()) {
            return Err(Error::Config("string delimiters must be non-empty".into()));
        }
        Ok(())
    }

    fn matches(&self, path: &Path) -> bool {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            return false;
        };
        self.file_extensions.iter().any(|ext| name.ends_with(ext.as_str()))
    }

    /// Delimiters ordered longest first so `'''` wins over `'`.
    fn delimiters_by_length(&self) -> Vec<&str> {
        let mut d: Vec<&str> = self.string_delimiters.iter().map(String::as_str).collect();
        d.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        d
    }
}

/// A comment-free, whitespace-trimmed, non-empty code line. This is the
/// identity of a graph node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizedLine(String);

impl NormalizedLine {
    /// Wraps text that is already canonical. Returns `None` for empty text
    /// or text with surrounding whitespace; comment state is not checked.
    pub fn from_canonical(text: impl Into<String>) -> Option<Self> {
        let text = text.into();
        (!text.is_empty() && text.trim().len() == text.len()).then_some(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl AsRef<str> for NormalizedLine {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NormalizedLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// How a file is cut into blocks. Transitions never cross a block boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSeparator {
    /// One or more blank or comment-only lines close the current block.
    #[default]
    BlankLine,
    /// The whole file is one block.
    None,
}

impl FromStr for BlockSeparator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blank_line" | "blank-line" | "blank" => Ok(Self::BlankLine),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown block separator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LineSequence {
    pub source_path: PathBuf,
    pub blocks: Vec<Vec<NormalizedLine>>,
}

impl LineSequence {
    pub fn line_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn lines(&self) -> impl Iterator<Item = &NormalizedLine> {
        self.blocks.iter().flatten()
    }

    /// Adjacent pairs inside each block, in source order.
    pub fn transitions(&self) -> impl Iterator<Item = (&NormalizedLine, &NormalizedLine)> {
        self.blocks
            .iter()
            .flat_map(|b| b.windows(2).map(|w| (&w[0], &w[1])))
    }
}

/// All files under `root` whose name ends with one of the profile's
/// extensions, sorted.
pub fn scan_corpus(root: &Path, profile: &LanguageProfile) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(root)
        .map_err(|e| Error::Input(format!("cannot read corpus directory {}: {e}", root.display())))?;
    if !meta.is_dir() {
        return Err(Error::Input(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() && profile.matches(entry.path()) {
            files.push(entry.into_path());
        }
    }
    files.sort();
    Ok(files)
}

/// Byte offset where the line comment starts, if any, outside string literals.
fn comment_start(raw: &str, marker: &str, delimiters: &[&str]) -> Option<usize> {
    let mut open: Option<&str> = None;
    let mut i = 0;
    while i < raw.len() {
        let rest = &raw[i..];
        match open {
            None => {
                if rest.starts_with(marker) {
                    return Some(i);
                }
                if let Some(d) = delimiters.iter().find(|d| rest.starts_with(**d)) {
                    open = Some(d);
                    i += d.len();
                    continue;
                }
            }
            Some(d) => {
                if rest.starts_with('\\') {
                    i += 1;
                    if let Some(c) = raw[i..].chars().next() {
                        i += c.len_utf8();
                    }
                    continue;
                }
                if rest.starts_with(d) {
                    open = None;
                    i += d.len();
                    continue;
                }
            }
        }
        i += rest.chars().next().map_or(1, char::len_utf8);
    }
    None
}

pub fn normalize_line(raw: &str, profile: &LanguageProfile) -> Option<NormalizedLine> {
    normalize_with(raw, &profile.line_comment_marker, &profile.delimiters_by_length())
}

fn normalize_with(raw: &str, marker: &str, delimiters: &[&str]) -> Option<NormalizedLine> {
    let code = match comment_start(raw, marker, delimiters) {
        Some(at) => &raw[..at],
        None => raw,
    };
    let trimmed = code.trim();
    (!trimmed.is_empty()).then(|| NormalizedLine(trimmed.to_owned()))
}

pub fn segment_blocks<S: AsRef<str>>(
    source_path: impl Into<PathBuf>,
    file_lines: &[S],
    profile: &LanguageProfile,
    separator: BlockSeparator,
) -> LineSequence {
    let delimiters = profile.delimiters_by_length();
    let mut blocks = Vec::new();
    let mut current: Vec<NormalizedLine> = Vec::new();
    for raw in file_lines {
        match normalize_with(raw.as_ref(), &profile.line_comment_marker, &delimiters) {
            Some(line) => current.push(line),
            None => {
                if separator == BlockSeparator::BlankLine && !current.is_empty() {
                    blocks.push(std::mem::take(&mut current));
                }
            }
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    LineSequence {
        source_path: source_path.into(),
        blocks,
    }
}

/// Reads one source file. Invalid UTF-8 is replaced with U+FFFD and logged.
pub fn read_source(path: &Path, profile: &LanguageProfile, separator: BlockSeparator) -> Result<LineSequence> {
    let bytes = fs::read(path).at(path)?;
    let text = String::from_utf8_lossy(&bytes);
    if let Cow::Owned(_) = text {
        log::warn!("{}: invalid UTF-8 replaced", path.display());
    }
    let lines: Vec<&str> = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .collect();
    Ok(segment_blocks(path, &lines, profile, separator))
}

pub fn read_sources(
    paths: &[PathBuf],
    profile: &LanguageProfile,
    separator: BlockSeparator,
) -> Result<Vec<LineSequence>> {
    paths
        .par_iter()
        .map(|p| read_source(p, profile, separator))
        .collect()
}

/// Scan and read a whole corpus directory.
pub fn load_corpus(root: &Path, profile: &LanguageProfile, separator: BlockSeparator) -> Result<Vec<LineSequence>> {
    profile.validate()?;
    let paths = scan_corpus(root, profile)?;
    read_sources(&paths, profile, separator)
}

/// Deterministic 90/10-style file split keyed on the path text and seed.
/// Returns `(train, holdout)`.
pub fn holdout_split(paths: &[PathBuf], holdout_fraction: f64, seed: u64) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let threshold = (holdout_fraction.clamp(0.0, 1.0) * u64::MAX as f64) as u64;
    paths.iter().cloned().partition(|p| {
        let h = twox_hash::XxHash64::oneshot(seed, p.to_string_lossy().as_bytes());
        h >= threshold
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn py() -> LanguageProfile {
        LanguageProfile::python()
    }

    fn norm(s: &str) -> Option<String> {
        normalize_line(s, &py()).map(NormalizedLine::into_string)
    }

    #[test]
    fn comment_only_line_is_dropped() {
        assert_eq!(norm("# helper function"), None);
        assert_eq!(norm("    # indented"), None);
        assert_eq!(norm("   "), None);
    }

    #[test]
    fn whitespace_is_trimmed() {
        assert_eq!(norm("    x = 1   ").as_deref(), Some("x = 1"));
    }

    #[test]
    fn hash_inside_string_is_kept() {
        assert_eq!(
            norm("s = '#not a comment'  # real one").as_deref(),
            Some("s = '#not a comment'")
        );
        assert_eq!(norm(r#"d = {"a#": 1} # x"#).as_deref(), Some(r#"d = {"a#": 1}"#));
        assert_eq!(norm(r#"s = "it's # fine""#).as_deref(), Some(r#"s = "it's # fine""#));
    }

    #[test]
    fn escaped_quote_does_not_close_string() {
        assert_eq!(norm(r"s = 'a\'#b' # c").as_deref(), Some(r"s = 'a\'#b'"));
    }

    #[test]
    fn triple_quotes_and_unterminated_strings() {
        assert_eq!(norm(r#"x = """doc # not""" # yes"#).as_deref(), Some(r#"x = """doc # not""""#));
        assert_eq!(norm("x = ''  # empty string").as_deref(), Some("x = ''"));
        // unterminated: rest of line is string content
        assert_eq!(norm("s = 'open # still string").as_deref(), Some("s = 'open # still string"));
    }

    #[test]
    fn other_comment_markers() {
        let profile = LanguageProfile {
            line_comment_marker: "//".into(),
            string_delimiters: vec!["\"".into()],
            file_extensions: vec![".rs".into()],
        };
        let n = normalize_line("let s = \"//x\"; // note", &profile).unwrap();
        assert_eq!(n.as_str(), "let s = \"//x\";");
    }

    #[test]
    fn blank_line_separator_splits_blocks() {
        let seq = segment_blocks("f.py", &["a=1", "", "b=2"], &py(), BlockSeparator::BlankLine);
        let blocks: Vec<Vec<&str>> = seq.blocks.iter().map(|b| b.iter().map(|l| l.as_str()).collect()).collect();
        assert_eq!(blocks, vec![vec!["a=1"], vec!["b=2"]]);
    }

    #[test]
    fn no_separator_keeps_one_block() {
        let seq = segment_blocks("f.py", &["a=1", "", "b=2"], &py(), BlockSeparator::None);
        assert_eq!(seq.blocks.len(), 1);
        assert_eq!(seq.blocks[0].len(), 2);
    }

    #[test]
    fn leading_comment_does_not_create_empty_block() {
        let seq = segment_blocks("f.py", &["# top", "a=1"], &py(), BlockSeparator::BlankLine);
        assert_eq!(seq.blocks.len(), 1);
        assert_eq!(seq.blocks[0][0].as_str(), "a=1");
    }

    #[test]
    fn runs_of_separators_close_once() {
        let seq = segment_blocks(
            "f.py",
            &["a", "", "# c", "   ", "b", "c", ""],
            &py(),
            BlockSeparator::BlankLine,
        );
        assert_eq!(seq.blocks.len(), 2);
        assert_eq!(seq.line_count(), 3);
        assert_eq!(seq.transitions().count(), 1);
    }

    #[test]
    fn empty_file_has_no_blocks() {
        let seq = segment_blocks("f.py", &["", "# only"], &py(), BlockSeparator::BlankLine);
        assert!(seq.blocks.is_empty());
    }

    #[test]
    fn scan_filters_by_extension_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "x").unwrap();
        fs::write(dir.path().join("a.py"), "x").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/c.py"), "x").unwrap();
        let files = scan_corpus(dir.path(), &py()).unwrap();
        let rel: Vec<_> = files
            .iter()
            .map(|p| p.strip_prefix(dir.path()).unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(rel, vec!["a.py", "sub/c.py"]);
    }

    #[test]
    fn scan_empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_corpus(dir.path(), &py()).unwrap().is_empty());
        let err = scan_corpus(&dir.path().join("nope"), &py()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn invalid_utf8_is_replaced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.py");
        fs::write(&path, b"x = 1\r\ny = b'\xff'\n").unwrap();
        let seq = read_source(&path, &py(), BlockSeparator::BlankLine).unwrap();
        assert_eq!(seq.blocks[0].len(), 2);
        assert_eq!(seq.blocks[0][0].as_str(), "x = 1");
        assert!(seq.blocks[0][1].as_str().contains('\u{FFFD}'));
    }

    #[test]
    fn holdout_split_partitions() {
        let paths: Vec<PathBuf> = (0..200).map(|i| PathBuf::from(format!("f{i}.py"))).collect();
        let (train, test) = holdout_split(&paths, 0.1, 7);
        assert_eq!(train.len() + test.len(), 200);
        assert!(!test.is_empty() && test.len() < 50);
        assert_eq!(holdout_split(&paths, 0.1, 7).1, test);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in "[ a-z#'\"\\\\=]{0,40}") {
            if let Some(once) = norm(&raw) {
                prop_assert_eq!(norm(&once), Some(once.clone()));
            }
        }

        #[test]
        fn no_comment_outside_strings(raw in "[ a-z#'\"\\\\=]{0,40}") {
            if let Some(line) = norm(&raw) {
                let p = py();
                prop_assert!(comment_start(&line, "#", &p.delimiters_by_length()).is_none());
                prop_assert!(!line.starts_with(char::is_whitespace));
                prop_assert!(!line.ends_with(char::is_whitespace));
            }
        }

        #[test]
        fn retained_count_matches_blocks(lines in proptest::collection::vec("[ a#]{0,4}", 0..30)) {
            let seq = segment_blocks("f.py", &lines, &py(), BlockSeparator::BlankLine);
            let retained = lines.iter().filter(|l| norm(l).is_some()).count();
            prop_assert_eq!(seq.line_count(), retained);
            prop_assert!(seq.blocks.iter().all(|b| !b.is_empty()));
            let flat: Vec<String> = seq.lines().map(|l| l.as_str().to_owned()).collect();
            let expected: Vec<String> = lines.iter().filter_map(|l| norm(l)).collect();
            prop_assert_eq!(flat, expected);
        }
    }
}
