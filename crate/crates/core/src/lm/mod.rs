//! Language-model gateway: one contract for text generation and
//! continuation scoring, with a remote completions adapter, a scripted
//! backend for deterministic tests, and per-run token accounting.

mod http;
mod ledger;
mod scripted;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpBackendConfig};
pub use ledger::{CallKind, LedgerEntry, LedgerTotals, Metered, Throttled, TokenLedger};
pub use scripted::{Alternative, RuleSet, ScriptRule, ScriptedBackend};

use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend does not support {feature}")]
    Capability { feature: String },
    #[error("cannot score an empty continuation")]
    EmptyContinuation,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("rule set: {0}")]
    Rules(String),
}

impl LmError {
    pub fn capability(feature: impl Into<String>) -> Self {
        LmError::Capability {
            feature: feature.into(),
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, LmError::Transport { .. })
    }
}

impl From<TransportError> for LmError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Exhausted { attempts, message } => {
                LmError::Transport { attempts, message }
            }
            other => LmError::Backend(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    #[serde(default)]
    pub logit_bias: BTreeMap<String, f64>,
    #[serde(default)]
    pub allowed_tokens: Option<BTreeSet<String>>,
    /// Sampling seed forwarded to backends that support one.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: 0.0,
            max_new_tokens: 64,
            stop_sequences: Vec::new(),
            logit_bias: BTreeMap::new(),
            allowed_tokens: None,
            seed: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_new_tokens(mut self, n: u32) -> Self {
        self.max_new_tokens = n;
        self
    }

    pub fn stop(mut self, s: impl Into<String>) -> Self {
        self.stop_sequences.push(s.into());
        self
    }

    pub fn bias(mut self, token: impl Into<String>, bias: f64) -> Self {
        self.logit_bias.insert(token.into(), bias);
        self
    }

    pub fn allow<I, S>(mut self, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.allowed_tokens = Some(tokens.into_iter().map(Into::into).collect());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(LmError::InvalidRequest(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(LmError::InvalidRequest(
                "max_new_tokens must be positive".into(),
            ));
        }
        if matches!(&self.allowed_tokens, Some(set) if set.is_empty()) {
            return Err(LmError::InvalidRequest(
                "allowed_tokens must be non-empty".into(),
            ));
        }
        if self.logit_bias.values().any(|b| b.is_nan()) {
            return Err(LmError::InvalidRequest("logit_bias contains NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub generated_tokens: u64,
}

/// Log-probabilities of a continuation's tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub token_logprobs: Vec<f64>,
    pub sum_logprob: f64,
    pub avg_logprob: f64,
    /// Tokens the backend consumed to produce the score (prompt plus continuation).
    pub prompt_tokens: u64,
}

impl ScoreResult {
    pub fn from_logprobs(token_logprobs: Vec<f64>, prompt_tokens: u64) -> Result<Self, LmError> {
        if token_logprobs.is_empty() {
            return Err(LmError::EmptyContinuation);
        }
        if let Some(bad) = token_logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(LmError::Backend(format!("token logprob {bad} is not <= 0")));
        }
        let sum_logprob: f64 = token_logprobs.iter().sum();
        let avg_logprob = sum_logprob / token_logprobs.len() as f64;
        Ok(Self {
            token_logprobs,
            sum_logprob,
            avg_logprob,
            prompt_tokens,
        })
    }
}

pub trait LanguageModel: Send + Sync {
    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, LmError>;

    /// Log-probabilities of `continuation` following `prompt`. No sampling.
    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, LmError>;
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, LmError> {
        (**self).generate(request)
    }

    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, LmError> {
        (**self).score_continuation(prompt, continuation)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Arc<T> {
    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, LmError> {
        (**self).generate(request)
    }

    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, LmError> {
        (**self).score_continuation(prompt, continuation)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, LmError> {
        (**self).generate(request)
    }

    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, LmError> {
        (**self).score_continuation(prompt, continuation)
    }
}

/// Cuts `text` at the earliest occurrence of any stop sequence.
pub fn apply_stop_sequences(text: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(i) => text[..i].to_string(),
        None => text.to_string(),
    }
}
