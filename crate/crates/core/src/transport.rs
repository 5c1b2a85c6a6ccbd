//! Blocking JSON-over-HTTP with bounded retries, shared by the remote LM and
//! remote retriever adapters.

use std::thread;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    /// Connection failures, timeouts and 5xx/429 responses, after all attempts.
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Exhausted { attempts: u32, message: String },
    /// Non-retryable HTTP status (4xx other than 429).
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response body: {0}")]
    Body(String),
}

pub(crate) fn agent(policy: &RetryPolicy) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(policy.timeout).build()
}

/// POSTs `body` to `url`, retrying transient failures with exponential backoff.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    bearer: Option<&str>,
    body: &Value,
    policy: &RetryPolicy,
) -> Result<Value, TransportError> {
    let attempts = policy.max_attempts.max(1);
    let mut backoff = policy.initial_backoff;
    let mut last = String::new();
    for attempt in 1..=attempts {
        let mut req = agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => {
                return resp
                    .into_json::<Value>()
                    .map_err(|e| TransportError::Body(e.to_string()))
            }
            Err(ureq::Error::Status(status, resp)) if status != 429 && status < 500 => {
                let body = resp.into_string().unwrap_or_default();
                return Err(TransportError::Status { status, body });
            }
            Err(e) => {
                last = e.to_string();
                tracing::warn!(url, attempt, error = %last, "transient http failure");
            }
        }
        if attempt < attempts {
            thread::sleep(backoff);
            backoff *= 2;
        }
    }
    Err(TransportError::Exhausted {
        attempts,
        message: last,
    })
}
