//! Corpus handling, BM25 search, remote retrievers and rank fusion.

mod bm25;
mod http;
mod rrf;

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bm25::{tokenize, Bm25Index, Bm25Params};
pub use http::{DocStore, HttpRetriever};
pub use rrf::{rrf_merge, RRF_DEFAULT_DEPTH, RRF_DEFAULT_K};

use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("duplicate doc_id {0:?}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("document {0:?} has empty text")]
    EmptyText(String),
    #[error("no rankings to fuse")]
    NoRankings,
    #[error("ranked list invalid: {0}")]
    InvalidRanking(String),
    #[error("line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error("unknown doc_id {0:?} returned by retriever")]
    UnknownDoc(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("index file: {0}")]
    IndexFormat(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "id")]
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        Self {
            doc_id: doc_id.into(),
            title: title.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
}

/// Ordered retrieval result: scores non-increasing, doc ids distinct.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedList {
    entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn new(entries: Vec<RankedEntry>) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for w in entries.windows(2) {
            if w[1].score > w[0].score || w[1].score.is_nan() {
                return Err(RetrievalError::InvalidRanking(format!(
                    "score increases at {:?}",
                    w[1].doc_id
                )));
            }
        }
        for e in &entries {
            if !seen.insert(e.doc_id.as_str()) {
                return Err(RetrievalError::InvalidRanking(format!(
                    "doc {:?} listed twice",
                    e.doc_id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncated(&self, k: usize) -> RankedList {
        RankedList {
            entries: self.entries.iter().take(k).cloned().collect(),
        }
    }
}

/// A top-k search backend with document lookup.
pub trait Retriever: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<RankedList, RetrievalError>;

    fn document(&self, doc_id: &str) -> Option<&Document>;

    /// Resolves a ranked list to documents, failing on ids this retriever cannot resolve.
    fn resolve<'a>(&'a self, list: &RankedList) -> Result<Vec<&'a Document>, RetrievalError> {
        list.doc_ids()
            .map(|id| {
                self.document(id)
                    .ok_or_else(|| RetrievalError::UnknownDoc(id.to_string()))
            })
            .collect()
    }
}

/// Reads a JSON-lines corpus (`{id, title, text}` per line). Blank lines are
/// skipped; errors carry the 1-based line number.
pub fn load_corpus_jsonl(path: &Path) -> Result<Vec<Document>, RetrievalError> {
    let file = std::fs::File::open(path).map_err(|source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_corpus_jsonl(std::io::BufReader::new(file))
}

pub fn read_corpus_jsonl(reader: impl BufRead) -> Result<Vec<Document>, RetrievalError> {
    let mut docs = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| RetrievalError::Corpus {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| RetrievalError::Corpus {
            line: line_no,
            message: e.to_string(),
        })?;
        if doc.text.trim().is_empty() {
            return Err(RetrievalError::Corpus {
                line: line_no,
                message: format!("document {:?} has empty text", doc.doc_id),
            });
        }
        if !ids.insert(doc.doc_id.clone()) {
            return Err(RetrievalError::Corpus {
                line: line_no,
                message: format!("duplicate doc_id {:?}", doc.doc_id),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}
