use std::path::Path;

use anyhow::{Context, Result};
use chainrag::retrieval::{load_corpus_jsonl, Bm25Index, Bm25Params};

use crate::setup::exec_mode;

/// Builds and saves a BM25 index; returns the document count.
pub fn cmd_index(corpus: &Path, index: &Path, workers: usize) -> Result<usize> {
    let docs = load_corpus_jsonl(corpus)
        .with_context(|| format!("loading corpus {}", corpus.display()))?;
    let built = Bm25Index::build_with(docs, Bm25Params::default(), exec_mode(workers))?;
    if let Some(dir) = index.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    built
        .save(index)
        .with_context(|| format!("saving index {}", index.display()))?;
    Ok(built.len())
}
