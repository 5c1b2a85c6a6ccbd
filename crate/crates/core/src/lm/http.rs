//! Adapter for completions-style HTTP endpoints (`POST {endpoint}/completions`).

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{
    apply_stop_sequences, CompletionRequest, CompletionResult, LanguageModel, LmError, ScoreResult,
};
use crate::transport::{self, RetryPolicy, TransportError};

/// Bias added to every allowed token so sampling stays inside the allowed set.
const ALLOWED_TOKEN_BOOST: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Token string → vocabulary ids, used for `logit_bias` and `allowed_tokens`.
    #[serde(default)]
    pub token_ids: BTreeMap<String, Vec<u32>>,
    /// Resolve unknown token strings through `POST {endpoint}/tokenize`.
    #[serde(default)]
    pub tokenize_endpoint: bool,
    /// Whether the endpoint honours `echo` with `logprobs` for scoring.
    #[serde(default = "yes")]
    pub echo_logprobs: bool,
}

fn yes() -> bool {
    true
}

impl HttpBackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            token_ids: BTreeMap::new(),
            tokenize_endpoint: false,
            echo_logprobs: true,
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    policy: RetryPolicy,
    agent: ureq::Agent,
    resolved: Mutex<HashMap<String, Vec<u32>>>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        Self::with_policy(config, RetryPolicy::default())
    }

    pub fn with_policy(config: HttpBackendConfig, policy: RetryPolicy) -> Self {
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        Self {
            agent: transport::agent(&policy),
            config,
            api_key,
            policy,
            resolved: Mutex::new(HashMap::new()),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.endpoint.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: &Value, feature: Option<&str>) -> Result<Value, LmError> {
        transport::post_json(
            &self.agent,
            &self.url(path),
            self.api_key.as_deref(),
            body,
            &self.policy,
        )
        .map_err(|e| match (e, feature) {
            (TransportError::Status { status, body }, Some(feature))
                if (status == 400 || status == 422) && body.contains(feature) =>
            {
                LmError::capability(feature)
            }
            (e, _) => e.into(),
        })
    }

    fn token_ids(&self, token: &str) -> Result<Vec<u32>, LmError> {
        if let Some(ids) = self.config.token_ids.get(token) {
            return Ok(ids.clone());
        }
        if let Some(ids) = self.resolved.lock().expect("poisoned").get(token) {
            return Ok(ids.clone());
        }
        if !self.config.tokenize_endpoint {
            return Err(LmError::capability(format!(
                "logit_bias (no token id configured for {token:?})"
            )));
        }
        let resp = self.post(
            "tokenize",
            &json!({ "model": self.config.model, "prompt": token, "add_special_tokens": false }),
            None,
        )?;
        let ids: Vec<u32> = resp
            .get("tokens")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| LmError::Backend("tokenize response lacks `tokens`".into()))?;
        if ids.is_empty() {
            return Err(LmError::Backend(format!(
                "token {token:?} tokenized to nothing"
            )));
        }
        self.resolved
            .lock()
            .expect("poisoned")
            .insert(token.to_string(), ids.clone());
        Ok(ids)
    }

    fn bias_map(&self, request: &CompletionRequest) -> Result<Map<String, Value>, LmError> {
        let mut by_id: BTreeMap<u32, f64> = BTreeMap::new();
        let mut add = |token: &str, bias: f64| -> Result<(), LmError> {
            let ids = self.token_ids(token)?;
            if ids.len() > 1 {
                tracing::warn!(
                    token,
                    ?ids,
                    "token maps to several ids; biasing all of them"
                );
            }
            for id in ids {
                *by_id.entry(id).or_default() += bias;
            }
            Ok(())
        };
        for (token, bias) in &request.logit_bias {
            add(token, *bias)?;
        }
        if let Some(allowed) = &request.allowed_tokens {
            for token in allowed {
                add(token, ALLOWED_TOKEN_BOOST)?;
            }
        }
        Ok(by_id
            .into_iter()
            .map(|(id, b)| (id.to_string(), json!(b)))
            .collect())
    }
}

impl LanguageModel for HttpBackend {
    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, LmError> {
        request.validate()?;
        let mut body = json!({
            "model": self.config.model,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        let feature = if request.allowed_tokens.is_some() || !request.logit_bias.is_empty() {
            body["logit_bias"] = Value::Object(self.bias_map(request)?);
            Some("logit_bias")
        } else {
            None
        };
        let resp: CompletionResponse =
            serde_json::from_value(self.post("completions", &body, feature)?)
                .map_err(|e| LmError::Backend(format!("completion response: {e}")))?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LmError::Backend("completion response has no choices".into()))?;
        let mut text = apply_stop_sequences(&choice.text, &request.stop_sequences);
        if let Some(allowed) = &request.allowed_tokens {
            let trimmed = text.trim();
            if !allowed.contains(trimmed) {
                return Err(LmError::Backend(format!(
                    "constrained decode returned {trimmed:?}, outside the allowed set"
                )));
            }
            text = trimmed.to_string();
        }
        let usage = resp
            .usage
            .ok_or_else(|| LmError::Backend("response lacks usage".into()))?;
        Ok(CompletionResult {
            text,
            prompt_tokens: usage.prompt_tokens,
            generated_tokens: usage
                .completion_tokens
                .min(u64::from(request.max_new_tokens)),
        })
    }

    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, LmError> {
        if continuation.trim().is_empty() {
            return Err(LmError::EmptyContinuation);
        }
        if !self.config.echo_logprobs {
            return Err(LmError::capability("echo logprobs"));
        }
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{prompt}{continuation}"),
            "max_tokens": 0,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 0,
        });
        let resp: CompletionResponse =
            serde_json::from_value(self.post("completions", &body, Some("echo"))?)
                .map_err(|e| LmError::Backend(format!("completion response: {e}")))?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LmError::Backend("completion response has no choices".into()))?;
        let lp = choice
            .logprobs
            .ok_or_else(|| LmError::capability("echo logprobs"))?;
        if lp.tokens.len() != lp.token_logprobs.len() {
            return Err(LmError::Backend(
                "logprobs tokens/values length mismatch".into(),
            ));
        }
        // Walk back from the end until the suffix covers the continuation.
        let mut covered = 0usize;
        let mut start = lp.tokens.len();
        while start > 0 && covered < continuation.len() {
            start -= 1;
            covered += lp.tokens[start].len();
        }
        let values = lp.token_logprobs[start..]
            .iter()
            .map(|v| {
                v.ok_or_else(|| LmError::Backend("missing logprob for continuation token".into()))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let prompt_tokens = resp
            .usage
            .map_or(lp.tokens.len() as u64, |u| u.prompt_tokens);
        ScoreResult::from_logprobs(values, prompt_tokens)
    }
}
