use std::collections::HashMap;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{Document, RankedEntry, RankedList, RetrievalError, Retriever};
use crate::transport::{self, RetryPolicy, TransportError};

/// Id → document lookup for retrievers that return ids only.
#[derive(Debug, Clone, Default)]
pub struct DocStore {
    docs: HashMap<String, Document>,
}

impl DocStore {
    pub fn new(docs: Vec<Document>) -> Result<Self, RetrievalError> {
        let mut map = HashMap::with_capacity(docs.len());
        for d in docs {
            if map.contains_key(&d.doc_id) {
                return Err(RetrievalError::DuplicateId(d.doc_id));
            }
            map.insert(d.doc_id.clone(), d);
        }
        Ok(Self { docs: map })
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.docs.get(id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

#[derive(Deserialize)]
struct WireHit {
    doc_id: String,
    score: f64,
}

/// Remote retriever speaking `POST {query, k}` → `[{doc_id, score}, ...]`
/// (a bare array, or an object with a `results` array). Documents are
/// resolved through a local [`DocStore`].
pub struct HttpRetriever {
    url: String,
    api_key: Option<String>,
    policy: RetryPolicy,
    agent: ureq::Agent,
    store: DocStore,
}

impl HttpRetriever {
    pub fn new(url: impl Into<String>, store: DocStore) -> Self {
        Self::with_policy(url, store, RetryPolicy::default())
    }

    pub fn with_policy(url: impl Into<String>, store: DocStore, policy: RetryPolicy) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            agent: transport::agent(&policy),
            policy,
            store,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }
}

impl Retriever for HttpRetriever {
    fn search(&self, query: &str, k: usize) -> Result<RankedList, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let body = json!({ "query": query, "k": k });
        let resp = transport::post_json(
            &self.agent,
            &self.url,
            self.api_key.as_deref(),
            &body,
            &self.policy,
        )?;
        let hits = match resp {
            Value::Object(mut obj) => obj.remove("results").unwrap_or(Value::Null),
            other => other,
        };
        let hits: Vec<WireHit> = serde_json::from_value(hits)
            .map_err(|e| TransportError::Body(format!("retriever response: {e}")))?;
        let mut entries: Vec<RankedEntry> = hits
            .into_iter()
            .map(|h| RankedEntry {
                doc_id: h.doc_id,
                score: h.score,
            })
            .collect();
        for e in &entries {
            if self.store.get(&e.doc_id).is_none() {
                return Err(RetrievalError::UnknownDoc(e.doc_id.clone()));
            }
        }
        entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
        entries.truncate(k);
        RankedList::new(entries)
    }

    fn document(&self, doc_id: &str) -> Option<&Document> {
        self.store.get(doc_id)
    }
}
