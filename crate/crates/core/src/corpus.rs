//! Corpus ingestion: dated, author-labelled documents, a word-level tokenizer
//! and sliding-window chunking.
//!
//! The on-disk layout is `root/{train,test}/<Author>_<Year>.txt`, or any set of
//! files listed in `root/manifest.csv` with columns `path,author,year,split`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_YEAR: i32 = 1700;
pub const MAX_YEAR: i32 = 2100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// One address: who wrote it, when, and which side of the split it sits on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub author: String,
    pub year: i32,
    pub split: Split,
    pub text: String,
}

impl DocumentRecord {
    pub fn new(author: impl Into<String>, year: i32, split: Split, text: impl Into<String>) -> Result<Self> {
        let author = author.into();
        if author.is_empty() {
            return Err(Error::InvalidInput("empty author name".into()));
        }
        if !(MIN_YEAR..=MAX_YEAR).contains(&year) {
            return Err(Error::InvalidInput(format!(
                "year {year} outside [{MIN_YEAR}, {MAX_YEAR}]"
            )));
        }
        let doc_id = format!("{}/{}_{}", split, author, year);
        Ok(Self {
            doc_id,
            author,
            year,
            split,
            text: text.into(),
        })
    }

    /// `<Author>_<Year>`, the identifier external embedding producers usually key on.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.author, self.year)
    }

    pub fn file_name(&self) -> String {
        format!("{}.txt", self.stem())
    }
}

/// Parse `<Author>_<Year>.txt`. The year is the last underscore-separated field;
/// anything before it (underscores included) is the author.
pub fn parse_file_name(name: &str) -> Option<(String, i32)> {
    let stem = name.strip_suffix(".txt")?;
    let (author, year) = stem.rsplit_once('_')?;
    if author.is_empty() || year.is_empty() || !year.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let year: i32 = year.parse().ok()?;
    if !(MIN_YEAR..=MAX_YEAR).contains(&year) {
        return None;
    }
    Some((author.to_string(), year))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLayout {
    Subdirs,
    Manifest,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub documents: Vec<DocumentRecord>,
    /// Files that parsed but held no text. Kept for reporting only.
    pub empty: Vec<DocumentRecord>,
}

impl Corpus {
    pub fn authors(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.documents.iter().map(|d| d.author.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DocumentRecord> {
        self.documents.iter().filter(move |d| d.split == split)
    }

    /// Authors lacking a train document or a test document.
    pub fn coverage_gaps(&self) -> Vec<(String, Split)> {
        let have: HashSet<(&str, Split)> = self
            .documents
            .iter()
            .map(|d| (d.author.as_str(), d.split))
            .collect();
        let mut gaps = Vec::new();
        for author in self.authors() {
            for split in [Split::Train, Split::Test] {
                if !have.contains(&(author.as_str(), split)) {
                    gaps.push((author.clone(), split));
                }
            }
        }
        gaps
    }
}

pub fn load_corpus(root: &Path, layout: SplitLayout) -> Result<Corpus> {
    if !root.is_dir() {
        return Err(Error::MissingPath(root.to_path_buf()));
    }
    let entries = match layout {
        SplitLayout::Subdirs => list_subdir_layout(root)?,
        SplitLayout::Manifest => read_manifest(root)?,
    };

    let mut corpus = Corpus::default();
    let mut seen = HashSet::new();
    for (path, author, year, split) in entries {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record = DocumentRecord::new(author, year, split, text)?;
        if !seen.insert((record.author.clone(), record.year, record.split)) {
            return Err(Error::DuplicateDocument {
                author: record.author,
                year: record.year,
                split: record.split.to_string(),
            });
        }
        if record.text.trim().is_empty() {
            log::warn!("empty document {}, excluded", path.display());
            corpus.empty.push(record);
        } else {
            corpus.documents.push(record);
        }
    }
    Ok(corpus)
}

type Entry = (PathBuf, String, i32, Split);

fn list_subdir_layout(root: &Path) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    let mut bad = Vec::new();
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.as_str());
        if !dir.is_dir() {
            continue;
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        for path in paths {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            match parse_file_name(&name) {
                Some((author, year)) => entries.push((path, author, year, split)),
                None => bad.push(format!("{}/{}", split, name)),
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::BadFilenames(bad));
    }
    Ok(entries)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    author: String,
    year: i32,
    split: String,
}

fn read_manifest(root: &Path) -> Result<Vec<Entry>> {
    let manifest = root.join("manifest.csv");
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(&manifest)
        .map_err(|e| Error::Manifest(format!("{}: {e}", manifest.display())))?;
    let mut entries = Vec::new();
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", line + 1)))?;
        if row.author.is_empty() {
            return Err(Error::Manifest(format!("row {}: empty author", line + 1)));
        }
        entries.push((root.join(&row.path), row.author, row.year, row.split.parse()?));
    }
    Ok(entries)
}

/// Lowercase, split on whitespace, and peel each maximal run of punctuation
/// off into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for piece in text.split_whitespace() {
        let lowered = piece.to_lowercase();
        let mut current = String::new();
        let mut current_is_word = true;
        for ch in lowered.chars() {
            let is_word = ch.is_alphanumeric();
            if !current.is_empty() && is_word != current_is_word {
                tokens.push(std::mem::take(&mut current));
            }
            current_is_word = is_word;
            current.push(ch);
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkerConfig {
    pub window: usize,
    pub overlap: usize,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        Self {
            window: 512,
            overlap: 128,
        }
    }
}

impl ChunkerConfig {
    pub fn new(window: usize, overlap: usize) -> Result<Self> {
        let cfg = Self { window, overlap };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.overlap >= self.window {
            return Err(Error::InvalidConfig(format!(
                "chunker needs 0 <= overlap < window, got window={} overlap={}",
                self.window, self.overlap
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.window - self.overlap
    }

    /// Number of spans `chunk` produces for `n` tokens.
    pub fn chunk_count(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else if n <= self.window {
            1
        } else {
            (n - self.window).div_ceil(self.stride()) + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSet {
    pub doc_id: String,
    pub spans: Vec<(usize, usize)>,
    pub tokens: Vec<String>,
}

impl ChunkSet {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn chunk_tokens(&self, i: usize) -> &[String] {
        let (start, end) = self.spans[i];
        &self.tokens[start..end]
    }

    pub fn chunk_id(&self, i: usize) -> String {
        chunk_id(&self.doc_id, i)
    }
}

/// Chunk row identifiers are `<doc_id>#<index>`.
pub fn chunk_id(doc_id: &str, index: usize) -> String {
    format!("{doc_id}#{index}")
}

/// Inverse of [`chunk_id`]; `None` when the id carries no chunk suffix.
pub fn split_chunk_id(id: &str) -> Option<(&str, usize)> {
    let (doc, idx) = id.rsplit_once('#')?;
    Some((doc, idx.parse().ok()?))
}

pub fn chunk(doc_id: &str, tokens: Vec<String>, cfg: &ChunkerConfig) -> Result<ChunkSet> {
    cfg.validate()?;
    let n = tokens.len();
    let spans = chunk_spans(n, cfg);
    Ok(ChunkSet {
        doc_id: doc_id.to_string(),
        spans,
        tokens,
    })
}

pub fn chunk_spans(n: usize, cfg: &ChunkerConfig) -> Vec<(usize, usize)> {
    let mut spans = Vec::with_capacity(cfg.chunk_count(n));
    if n == 0 {
        return spans;
    }
    let mut start = 0;
    loop {
        let end = (start + cfg.window).min(n);
        spans.push((start, end));
        if end == n {
            break;
        }
        start += cfg.stride();
    }
    spans
}

pub fn chunk_document(doc: &DocumentRecord, cfg: &ChunkerConfig) -> Result<ChunkSet> {
    chunk(&doc.doc_id, tokenize(&doc.text), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_plain_and_underscored_names() {
        assert_eq!(parse_file_name("Adams_1797.txt"), Some(("Adams".into(), 1797)));
        assert_eq!(parse_file_name("Roosevelt_1936.txt"), Some(("Roosevelt".into(), 1936)));
        assert_eq!(
            parse_file_name("Lyndon_B._Johnson_1966.txt"),
            Some(("Lyndon_B._Johnson".into(), 1966))
        );
        assert_eq!(parse_file_name("Adams.txt"), None);
        assert_eq!(parse_file_name("Adams_17x7.txt"), None);
        assert_eq!(parse_file_name("_1797.txt"), None);
        assert_eq!(parse_file_name("Adams_1797.md"), None);
        assert_eq!(parse_file_name("Adams_1600.txt"), None);
    }

    #[test]
    fn tokenizer_rules() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("To be, or not"), toks(&["to", "be", ",", "or", "not"]));
        assert_eq!(tokenize("Well...\"yes\"!"), toks(&["well", "...\"", "yes", "\"!"]));
        assert_eq!(tokenize("  \t\n "), Vec::<String>::new());
    }

    #[test]
    fn chunk_examples() {
        let cfg = ChunkerConfig::default();
        assert_eq!(chunk_spans(512, &cfg), vec![(0, 512)]);
        assert_eq!(chunk_spans(1000, &cfg), vec![(0, 512), (384, 896), (768, 1000)]);
        assert_eq!(chunk_spans(100, &cfg), vec![(0, 100)]);
        assert!(chunk_spans(0, &cfg).is_empty());
        assert_eq!(cfg.chunk_count(1000), 3);
    }

    #[test]
    fn empty_document_has_no_chunks() {
        let set = chunk("d", Vec::new(), &ChunkerConfig::default()).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn chunker_config_validation() {
        assert!(ChunkerConfig::new(512, 512).is_err());
        assert!(ChunkerConfig::new(0, 0).is_err());
        assert!(ChunkerConfig::new(4, 0).is_ok());
    }

    #[test]
    fn chunk_ids_round_trip() {
        let id = chunk_id("train/Adams_1797", 3);
        assert_eq!(split_chunk_id(&id), Some(("train/Adams_1797", 3)));
        assert_eq!(split_chunk_id("train/Adams_1797"), None);
    }

    #[test]
    fn record_validates_year_and_author() {
        assert!(DocumentRecord::new("", 1800, Split::Train, "x").is_err());
        assert!(DocumentRecord::new("A", 1699, Split::Train, "x").is_err());
        let rec = DocumentRecord::new("Adams", 1797, Split::Train, "x").unwrap();
        assert_eq!(rec.doc_id, "train/Adams_1797");
        assert_eq!(rec.file_name(), "Adams_1797.txt");
    }
}
