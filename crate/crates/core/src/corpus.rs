//! Corpus ingestion and cleaning.
//!
//! Sources in JSONL, CSV or plain text are adapted into [`Document`]s that
//! follow a title/text/url template. The preparation pipeline then runs in a
//! fixed order: sentence segmentation on the raw text, normalization of each
//! sentence, document-level exact deduplication, and statistics.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default)]
    pub source: String,
}

impl AsRef<Document> for Document {
    fn as_ref(&self) -> &Document {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    Jsonl,
    PlainText,
    Csv,
}

impl SourceFormat {
    /// Guess from a file extension: `.jsonl`/`.json`, `.csv`, anything else is plain text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => SourceFormat::Jsonl,
            Some("csv") => SourceFormat::Csv,
            _ => SourceFormat::PlainText,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlainTextMode {
    /// The whole file is one document.
    #[default]
    WholeFile,
    /// Blank-line separated blocks are separate documents.
    Blocks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OnRecordError {
    #[default]
    Skip,
    Abort,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestOptions {
    pub plain_text: PlainTextMode,
    pub on_error: OnRecordError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub documents: Vec<Document>,
    /// Records skipped under [`OnRecordError::Skip`].
    pub errors: Vec<RecordError>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<serde_json::Value>,
    title: Option<String>,
    text: Option<String>,
    url: Option<String>,
    source: Option<String>,
}

impl RawRecord {
    fn into_document(
        self,
        fallback_id: String,
        tag: &str,
    ) -> std::result::Result<Document, String> {
        let text = self
            .text
            .ok_or_else(|| "missing \"text\" field".to_string())?;
        let id = match self.id {
            None | Some(serde_json::Value::Null) => fallback_id,
            Some(serde_json::Value::String(s)) if !s.is_empty() => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => return Err(format!("invalid \"id\" field: {other}")),
        };
        Ok(Document {
            id,
            title: self.title.filter(|t| !t.is_empty()),
            text,
            url: self.url.filter(|u| !u.is_empty()),
            source: self
                .source
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| tag.to_string()),
        })
    }
}

/// Read one source file into documents, preserving input order.
pub fn ingest_source(
    path: &Path,
    format: SourceFormat,
    source: &str,
    opts: IngestOptions,
) -> Result<Ingested> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("doc")
        .to_string();
    let mut out = Ingested::default();
    let record_error = |out: &mut Ingested, line: usize, message: String| -> Result<()> {
        match opts.on_error {
            OnRecordError::Abort => Err(Error::Record {
                path: path.to_path_buf(),
                line,
                message,
            }),
            OnRecordError::Skip => {
                log::warn!("{}:{line}: skipping record: {message}", path.display());
                out.errors.push(RecordError { line, message });
                Ok(())
            }
        }
    };

    match format {
        SourceFormat::Jsonl => {
            for (idx, line) in content.lines().enumerate() {
                let lineno = idx + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed = serde_json::from_str::<RawRecord>(line)
                    .map_err(|e| e.to_string())
                    .and_then(|r| r.into_document(format!("{stem}-{lineno}"), source));
                match parsed {
                    Ok(doc) => out.documents.push(doc),
                    Err(msg) => record_error(&mut out, lineno, msg)?,
                }
            }
        }
        SourceFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(false)
                .from_reader(content.as_bytes());
            let headers = reader
                .headers()
                .map_err(|e| Error::Corpus(format!("{}: bad csv header: {e}", path.display())))?
                .clone();
            let col = |name: &str| headers.iter().position(|h| h.trim() == name);
            let (id_col, title_col, text_col, url_col, source_col) = (
                col("id"),
                col("title"),
                col("text"),
                col("url"),
                col("source"),
            );
            for (idx, rec) in reader.records().enumerate() {
                let lineno = idx + 2;
                let rec = match rec {
                    Ok(r) => r,
                    Err(e) => {
                        let line = e.position().map(|p| p.line() as usize).unwrap_or(lineno);
                        record_error(&mut out, line, e.to_string())?;
                        continue;
                    }
                };
                let lineno = rec.position().map(|p| p.line() as usize).unwrap_or(lineno);
                let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).map(str::to_string);
                let raw = RawRecord {
                    id: field(id_col).map(serde_json::Value::String),
                    title: field(title_col),
                    text: field(text_col),
                    url: field(url_col),
                    source: field(source_col),
                };
                match raw.into_document(format!("{stem}-{lineno}"), source) {
                    Ok(doc) => out.documents.push(doc),
                    Err(msg) => record_error(&mut out, lineno, msg)?,
                }
            }
        }
        SourceFormat::PlainText => match opts.plain_text {
            PlainTextMode::WholeFile => {
                if !content.trim().is_empty() {
                    out.documents.push(Document {
                        id: stem,
                        title: None,
                        text: content,
                        url: None,
                        source: source.to_string(),
                    });
                }
            }
            PlainTextMode::Blocks => {
                let mut block = String::new();
                let mut n = 0usize;
                let mut flush = |block: &mut String, out: &mut Ingested| {
                    if !block.trim().is_empty() {
                        n += 1;
                        out.documents.push(Document {
                            id: format!("{stem}-{n}"),
                            title: None,
                            text: std::mem::take(block),
                            url: None,
                            source: source.to_string(),
                        });
                    }
                    block.clear();
                };
                for line in content.lines() {
                    if line.trim().is_empty() {
                        flush(&mut block, &mut out);
                    } else {
                        if !block.is_empty() {
                            block.push('\n');
                        }
                        block.push_str(line);
                    }
                }
                flush(&mut block, &mut out);
            }
        },
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormConfig {
    pub lowercase: bool,
    pub collapse_whitespace: bool,
    /// Apply canonical composition (NFC).
    pub unicode_nfc: bool,
    /// Punctuation kept in addition to letters, digits and whitespace.
    pub punctuation: String,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            collapse_whitespace: true,
            unicode_nfc: true,
            punctuation: ".,;:!?'\"()-".to_string(),
        }
    }
}

impl NormConfig {
    pub fn is_allowed(&self, c: char) -> bool {
        c.is_alphabetic() || c.is_numeric() || c.is_whitespace() || self.punctuation.contains(c)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self
            .punctuation
            .chars()
            .find(|c| c.is_alphanumeric() || c.is_whitespace())
        {
            return Err(Error::Corpus(format!(
                "punctuation set may only hold punctuation, found {c:?}"
            )));
        }
        Ok(())
    }
}

/// Normalize one piece of text. Disallowed characters become a single space.
pub fn normalize_text(text: &str, cfg: &NormConfig) -> String {
    let composed: String = if cfg.unicode_nfc {
        text.nfc().collect()
    } else {
        text.to_string()
    };
    let cased: String = if cfg.lowercase {
        let lower = composed.to_lowercase();
        if cfg.unicode_nfc {
            lower.nfc().collect()
        } else {
            lower
        }
    } else {
        composed
    };

    let mut out = String::with_capacity(cased.len());
    let mut pending_space = false;
    for c in cased.chars() {
        let c = if cfg.is_allowed(c) { c } else { ' ' };
        if cfg.collapse_whitespace && c.is_whitespace() {
            pending_space = true;
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.push(c);
    }
    if cfg.collapse_whitespace {
        out
    } else {
        out.trim().to_string()
    }
}

pub fn normalize_document(doc: &Document, cfg: &NormConfig) -> Document {
    Document {
        id: doc.id.clone(),
        title: doc
            .title
            .as_deref()
            .map(|t| normalize_text(t, cfg))
            .filter(|t| !t.is_empty()),
        text: normalize_text(&doc.text, cfg),
        url: doc.url.clone(),
        source: doc.source.clone(),
    }
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Split raw text after runs of `.`, `!` or `?` that are followed by
/// whitespace. A trailing fragment without a terminator is its own sentence.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if !is_terminal(c) {
            continue;
        }
        match iter.peek() {
            Some(&(_, next)) if next.is_whitespace() => {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    sentences.push(s.to_string());
                }
                start = end;
            }
            _ => {}
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

/// A normalized document together with its normalized sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedDocument {
    pub doc: Document,
    pub sentences: Vec<String>,
}

impl AsRef<Document> for PreparedDocument {
    fn as_ref(&self) -> &Document {
        &self.doc
    }
}

impl PreparedDocument {
    /// Segment an already-normalized document.
    pub fn from_normalized(doc: Document) -> Self {
        let sentences = segment_sentences(&doc.text);
        Self { doc, sentences }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub input: usize,
    pub dropped_empty: usize,
    pub duplicates_removed: usize,
    pub duplicate_sentences_removed: usize,
    pub output: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DedupLevel {
    #[default]
    Document,
    /// Document-level dedup followed by removal of repeated sentences.
    Sentence,
}

/// Segment each raw document, normalize its sentences, and drop documents
/// that are empty after cleaning. Order is preserved.
pub fn normalize_and_segment(
    docs: Vec<Document>,
    cfg: &NormConfig,
) -> (Vec<PreparedDocument>, usize) {
    let prepared: Vec<Option<PreparedDocument>> = docs
        .into_par_iter()
        .map(|doc| {
            let sentences: Vec<String> = segment_sentences(&doc.text)
                .iter()
                .map(|s| normalize_text(s, cfg))
                .filter(|s| !s.is_empty())
                .collect();
            if sentences.is_empty() {
                return None;
            }
            let mut norm = normalize_document(&doc, cfg);
            norm.text = sentences.join(" ");
            Some(PreparedDocument {
                doc: norm,
                sentences,
            })
        })
        .collect();
    let before = prepared.len();
    let kept: Vec<PreparedDocument> = prepared.into_iter().flatten().collect();
    let dropped = before - kept.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} document(s) that were empty after cleaning");
    }
    (kept, dropped)
}

/// Full cleaning pipeline: segment, normalize, dedup.
pub fn prepare_corpus(
    docs: Vec<Document>,
    cfg: &NormConfig,
    level: DedupLevel,
) -> (Vec<PreparedDocument>, PrepareReport) {
    let input = docs.len();
    let (prepared, dropped_empty) = normalize_and_segment(docs, cfg);
    let after_norm = prepared.len();
    let mut unique = dedup(prepared);
    let duplicates_removed = after_norm - unique.len();
    let mut duplicate_sentences_removed = 0;
    if level == DedupLevel::Sentence {
        duplicate_sentences_removed = dedup_sentences(&mut unique);
    }
    let report = PrepareReport {
        input,
        dropped_empty,
        duplicates_removed,
        duplicate_sentences_removed,
        output: unique.len(),
    };
    (unique, report)
}

fn content_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Keep the first occurrence of each distinct text (exact content hash).
pub fn dedup<D: AsRef<Document>>(docs: impl IntoIterator<Item = D>) -> Vec<D> {
    let mut seen = HashSet::new();
    docs.into_iter()
        .filter(|d| seen.insert(content_hash(&d.as_ref().text)))
        .collect()
}

/// Remove sentences already seen earlier in the corpus; documents left
/// without sentences are dropped. Returns the number of sentences removed.
pub fn dedup_sentences(docs: &mut Vec<PreparedDocument>) -> usize {
    let mut seen = HashSet::new();
    let mut removed = 0;
    for d in docs.iter_mut() {
        let before = d.sentences.len();
        d.sentences.retain(|s| seen.insert(content_hash(s)));
        removed += before - d.sentences.len();
        d.doc.text = d.sentences.join(" ");
    }
    docs.retain(|d| !d.sentences.is_empty());
    removed
}

/// Concatenate sources in order, qualifying ids as `source:id`.
pub fn merge_corpora(sources: Vec<Vec<Document>>) -> Result<Vec<Document>> {
    let mut seen = HashSet::new();
    let mut merged = Vec::with_capacity(sources.iter().map(Vec::len).sum());
    for source in sources {
        for mut doc in source {
            if doc.id.is_empty() {
                return Err(Error::Corpus("document with empty id".into()));
            }
            doc.id = format!("{}:{}", doc.source, doc.id);
            if !seen.insert(doc.id.clone()) {
                return Err(Error::Corpus(format!("duplicate document id {}", doc.id)));
            }
            merged.push(doc);
        }
    }
    Ok(merged)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub items: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub unique_words: usize,
}

pub fn corpus_stats<'a>(docs: impl IntoIterator<Item = &'a PreparedDocument>) -> CorpusStats {
    let mut vocab: HashSet<&str> = HashSet::new();
    let mut stats = CorpusStats::default();
    for d in docs {
        stats.items += 1;
        stats.sentences += d.sentences.len();
        for s in &d.sentences {
            for w in s.split_whitespace() {
                stats.tokens += 1;
                vocab.insert(w);
            }
        }
    }
    stats.unique_words = vocab.len();
    stats
}

/// Per-source statistics in first-appearance order, followed by a total row.
pub fn stats_by_source(docs: &[PreparedDocument]) -> Vec<(String, CorpusStats)> {
    let mut order: Vec<String> = Vec::new();
    for d in docs {
        if !order.contains(&d.doc.source) {
            order.push(d.doc.source.clone());
        }
    }
    let mut rows: Vec<(String, CorpusStats)> = order
        .into_iter()
        .map(|src| {
            let s = corpus_stats(docs.iter().filter(|d| d.doc.source == src));
            (src, s)
        })
        .collect();
    rows.push(("total".to_string(), corpus_stats(docs)));
    rows
}

/// Render rows as a right-aligned text table.
pub fn stats_table(rows: &[(String, CorpusStats)]) -> String {
    let header = ["source", "items", "sentences", "tokens", "unique_words"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|(name, s)| {
            [
                name.clone(),
                s.items.to_string(),
                s.sentences.to_string(),
                s.tokens.to_string(),
                s.unique_words.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    for row in &body {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = String::new();
    for item in items {
        buf.push_str(&serde_json::to_string(&item)?);
        buf.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
