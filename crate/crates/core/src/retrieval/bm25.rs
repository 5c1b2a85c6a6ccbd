use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Document, RankedEntry, RankedList, RetrievalError, Retriever};
use crate::exec::{self, ExecMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

/// Lowercases and splits on every non-alphanumeric character. No stemming, no stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    params: Bm25Params,
    docs: Vec<Document>,
    doc_lens: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
}

/// Immutable in-memory inverted index with Okapi BM25 scoring.
///
/// idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)), which stays positive for
/// terms present in every document.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<Document>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    postings: BTreeMap<String, Vec<Posting>>,
    by_id: HashMap<String, u32>,
}

impl Bm25Index {
    pub fn build(docs: Vec<Document>) -> Result<Self, RetrievalError> {
        Self::build_with(docs, Bm25Params::default(), ExecMode::default())
    }

    /// Tokenizes documents under `mode`, then merges postings in document order.
    pub fn build_with(
        docs: Vec<Document>,
        params: Bm25Params,
        mode: ExecMode,
    ) -> Result<Self, RetrievalError> {
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if d.text.trim().is_empty() {
                return Err(RetrievalError::EmptyText(d.doc_id.clone()));
            }
            if by_id.insert(d.doc_id.clone(), i as u32).is_some() {
                return Err(RetrievalError::DuplicateId(d.doc_id.clone()));
            }
        }

        let term_counts = exec::map_indexed(mode, &docs, |_, d| {
            let tokens = tokenize(&d.text);
            let len = tokens.len() as u32;
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            (len, tf)
        });

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (doc, (len, tf)) in term_counts.into_iter().enumerate() {
            doc_lens.push(len);
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf: count,
                });
            }
        }
        let avg_len = average(&doc_lens);
        Ok(Self {
            params,
            docs,
            doc_lens,
            avg_len,
            postings,
            by_id,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top-`k` documents by BM25 score; ties broken by doc_id ascending.
    /// Documents sharing no term with the query are not returned.
    pub fn search(&self, query: &str, k: usize) -> Result<RankedList, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let Bm25Params { k1, b } = self.params;
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for p in list {
                let tf = f64::from(p.tf);
                let dl = f64::from(self.doc_lens[p.doc as usize]);
                let norm = k1 * (1.0 - b + b * dl / self.avg_len);
                *acc.entry(p.doc).or_default() += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        let mut scored: Vec<(u32, f64)> = acc.into_iter().collect();
        let cmp = |a: &(u32, f64), b: &(u32, f64)| {
            b.1.total_cmp(&a.1).then_with(|| {
                self.docs[a.0 as usize]
                    .doc_id
                    .cmp(&self.docs[b.0 as usize].doc_id)
            })
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        let entries = scored
            .into_iter()
            .map(|(doc, score)| RankedEntry {
                doc_id: self.docs[doc as usize].doc_id.clone(),
                score,
            })
            .collect();
        Ok(RankedList { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let file = IndexFile {
            params: self.params,
            docs: self.docs.clone(),
            doc_lens: self.doc_lens.clone(),
            postings: self.postings.clone(),
        };
        let out = std::fs::File::create(path).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::to_writer(std::io::BufWriter::new(out), &file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let file = std::fs::File::open(path).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let IndexFile {
            params,
            docs,
            doc_lens,
            postings,
        } = serde_json::from_reader(std::io::BufReader::new(file))?;
        if docs.len() != doc_lens.len() {
            return Err(RetrievalError::InvalidRanking(
                "index file: document/length count mismatch".into(),
            ));
        }
        let by_id = docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.clone(), i as u32))
            .collect();
        let avg_len = average(&doc_lens);
        Ok(Self {
            params,
            docs,
            doc_lens,
            avg_len,
            postings,
            by_id,
        })
    }
}

fn average(lens: &[u32]) -> f64 {
    let total: u64 = lens.iter().map(|&l| u64::from(l)).sum();
    (total as f64 / lens.len() as f64).max(f64::MIN_POSITIVE)
}

impl Retriever for Bm25Index {
    fn search(&self, query: &str, k: usize) -> Result<RankedList, RetrievalError> {
        Bm25Index::search(self, query, k)
    }

    fn document(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i as usize])
    }
}
