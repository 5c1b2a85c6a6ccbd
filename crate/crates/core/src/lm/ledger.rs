use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, CompletionResult, LanguageModel, LmError, ScoreResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Generate,
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub kind: CallKind,
    pub prompt_tokens: u64,
    pub generated_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub generated_tokens: u64,
}

/// Append-only, thread-safe record of LM calls keyed by run id.
#[derive(Debug, Default, Clone)]
pub struct TokenLedger {
    inner: Arc<Mutex<BTreeMap<String, Vec<LedgerEntry>>>>,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, run_id: &str, entry: LedgerEntry) {
        let mut map = self.inner.lock().expect("ledger poisoned");
        map.entry(run_id.to_string()).or_default().push(entry);
    }

    pub fn entries(&self, run_id: &str) -> Vec<LedgerEntry> {
        let map = self.inner.lock().expect("ledger poisoned");
        map.get(run_id).cloned().unwrap_or_default()
    }

    pub fn totals(&self, run_id: &str) -> LedgerTotals {
        self.entries(run_id)
            .iter()
            .fold(LedgerTotals::default(), |mut t, e| {
                t.calls += 1;
                t.prompt_tokens += e.prompt_tokens;
                t.generated_tokens += e.generated_tokens;
                t
            })
    }

    pub fn run_ids(&self) -> Vec<String> {
        self.inner
            .lock()
            .expect("ledger poisoned")
            .keys()
            .cloned()
            .collect()
    }
}

/// Wraps a model and appends one ledger entry per successful call.
pub struct Metered<M> {
    inner: M,
    ledger: TokenLedger,
    run_id: String,
}

impl<M: LanguageModel> Metered<M> {
    pub fn new(inner: M, ledger: TokenLedger, run_id: impl Into<String>) -> Self {
        Self {
            inner,
            ledger,
            run_id: run_id.into(),
        }
    }

    pub fn ledger(&self) -> &TokenLedger {
        &self.ledger
    }
}

impl<M: LanguageModel> LanguageModel for Metered<M> {
    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, LmError> {
        let out = self.inner.generate(request)?;
        self.ledger.record(
            &self.run_id,
            LedgerEntry {
                kind: CallKind::Generate,
                prompt_tokens: out.prompt_tokens,
                generated_tokens: out.generated_tokens,
            },
        );
        Ok(out)
    }

    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, LmError> {
        let out = self.inner.score_continuation(prompt, continuation)?;
        self.ledger.record(
            &self.run_id,
            LedgerEntry {
                kind: CallKind::Score,
                prompt_tokens: out.prompt_tokens,
                generated_tokens: 0,
            },
        );
        Ok(out)
    }
}

/// Caps the number of in-flight requests to the wrapped model.
pub struct Throttled<M> {
    inner: M,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl<M: LanguageModel> Throttled<M> {
    pub fn new(inner: M, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn with_permit<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut n = self.in_flight.lock().expect("throttle poisoned");
            while *n >= self.limit {
                n = self.freed.wait(n).expect("throttle poisoned");
            }
            *n += 1;
        }
        let out = f();
        *self.in_flight.lock().expect("throttle poisoned") -= 1;
        self.freed.notify_one();
        out
    }
}

impl<M: LanguageModel> LanguageModel for Throttled<M> {
    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, LmError> {
        self.with_permit(|| self.inner.generate(request))
    }

    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, LmError> {
        self.with_permit(|| self.inner.score_continuation(prompt, continuation))
    }
}
