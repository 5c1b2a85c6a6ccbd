//! Deterministic rule-driven backend.
//!
//! Rules are tried in order; the first one whose prompt filters match and
//! which can serve the call wins. A rule serves generation when it carries
//! `output_text`, `alternatives` or `token_logits`, and serves scoring when
//! it carries `per_token_logprob` or `per_token_logprob_list`. Tokens are
//! whitespace-separated words.
//!
//! Sampling at temperature > 0 draws from a stream keyed on the request seed
//! and the prompt text, so `generate` is a pure function of
//! (rule set, request). The literal `{nonce}` in an output is replaced by
//! eight hex digits from the same stream.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    apply_stop_sequences, CompletionRequest, CompletionResult, LanguageModel, LmError, ScoreResult,
};
use crate::seeds;

/// Logit assumed for a constrained-decoding token the rule does not mention.
const MISSING_LOGIT: f64 = -1.0e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub text: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Prompt must contain this. The empty string matches everything.
    pub match_substring: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub require_all: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reject_any: Vec<String>,
    /// Scoring only: the continuation must contain this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_continuation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_text: Option<String>,
    /// Sampled at temperature > 0 with probability ∝ weight^(1/T).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alternatives: Vec<Alternative>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token_logprob: Option<f64>,
    /// Per-token values; continuations longer than the list reuse the last value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token_logprob_list: Option<Vec<f64>>,
    /// Logits used for constrained decoding over `allowed_tokens`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub token_logits: BTreeMap<String, f64>,
}

impl ScriptRule {
    pub fn on(substring: impl Into<String>) -> Self {
        Self {
            match_substring: substring.into(),
            ..Self::default()
        }
    }

    pub fn requiring(mut self, s: impl Into<String>) -> Self {
        self.require_all.push(s.into());
        self
    }

    pub fn rejecting(mut self, s: impl Into<String>) -> Self {
        self.reject_any.push(s.into());
        self
    }

    pub fn for_continuation(mut self, s: impl Into<String>) -> Self {
        self.match_continuation = Some(s.into());
        self
    }

    pub fn output(mut self, text: impl Into<String>) -> Self {
        self.output_text = Some(text.into());
        self
    }

    pub fn alternative(mut self, text: impl Into<String>, weight: f64) -> Self {
        self.alternatives.push(Alternative {
            text: text.into(),
            weight,
        });
        self
    }

    pub fn logprob(mut self, per_token: f64) -> Self {
        self.per_token_logprob = Some(per_token);
        self
    }

    pub fn logprobs(mut self, list: Vec<f64>) -> Self {
        self.per_token_logprob_list = Some(list);
        self
    }

    pub fn logit(mut self, token: impl Into<String>, value: f64) -> Self {
        self.token_logits.insert(token.into(), value);
        self
    }

    fn matches_prompt(&self, prompt: &str) -> bool {
        prompt.contains(&self.match_substring)
            && self.require_all.iter().all(|s| prompt.contains(s.as_str()))
            && !self.reject_any.iter().any(|s| prompt.contains(s.as_str()))
    }

    fn serves_generation(&self) -> bool {
        self.match_continuation.is_none()
            && (self.output_text.is_some()
                || !self.alternatives.is_empty()
                || !self.token_logits.is_empty())
    }

    fn serves_scoring(&self) -> bool {
        self.per_token_logprob.is_some() || self.per_token_logprob_list.is_some()
    }

    fn is_default(&self) -> bool {
        self.match_substring.is_empty()
            && self.require_all.is_empty()
            && self.reject_any.is_empty()
            && self.match_continuation.is_none()
            && self.output_text.is_some()
    }

    fn validate(&self, index: usize) -> Result<(), LmError> {
        let bad = |msg: String| Err(LmError::Rules(format!("rule {index}: {msg}")));
        if let Some(lp) = self.per_token_logprob {
            if !(lp <= 0.0) {
                return bad(format!("per_token_logprob {lp} must be <= 0"));
            }
        }
        if let Some(list) = &self.per_token_logprob_list {
            if list.is_empty() {
                return bad("per_token_logprob_list is empty".into());
            }
            if let Some(lp) = list.iter().find(|lp| !(**lp <= 0.0)) {
                return bad(format!("per_token_logprob_list value {lp} must be <= 0"));
            }
        }
        if self
            .alternatives
            .iter()
            .any(|a| !(a.weight > 0.0) || !a.weight.is_finite())
        {
            return bad("alternative weights must be positive".into());
        }
        if self.token_logits.values().any(|v| v.is_nan()) {
            return bad("token_logits contains NaN".into());
        }
        Ok(())
    }

    fn logprob_at(&self, i: usize) -> f64 {
        match (&self.per_token_logprob_list, self.per_token_logprob) {
            (Some(list), _) => list[i.min(list.len() - 1)],
            (None, Some(lp)) => lp,
            (None, None) => unreachable!("checked by serves_scoring"),
        }
    }
}

/// Ordered rule list with a mandatory catch-all default.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    rules: Vec<ScriptRule>,
}

impl RuleSet {
    /// Requires at least one default rule: empty `match_substring`, no other
    /// filters, and an `output_text`.
    pub fn new(rules: Vec<ScriptRule>) -> Result<Self, LmError> {
        for (i, r) in rules.iter().enumerate() {
            r.validate(i)?;
        }
        if !rules.iter().any(ScriptRule::is_default) {
            return Err(LmError::Rules(
                "a default rule (empty match_substring with output_text) is required".into(),
            ));
        }
        Ok(Self { rules })
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let rules: Vec<ScriptRule> =
            serde_json::from_str(text).map_err(|e| LmError::Rules(e.to_string()))?;
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LmError::Rules(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rules).expect("rules serialize")
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    fn generation_rule(&self, prompt: &str) -> &ScriptRule {
        self.rules
            .iter()
            .find(|r| r.serves_generation() && r.matches_prompt(prompt))
            .expect("default rule always matches")
    }

    fn scoring_rule(&self, prompt: &str, continuation: &str) -> Option<&ScriptRule> {
        self.rules.iter().find(|r| {
            r.serves_scoring()
                && r.matches_prompt(prompt)
                && r.match_continuation
                    .as_ref()
                    .is_none_or(|c| continuation.contains(c.as_str()))
        })
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    rules: RuleSet,
    constrained_decoding: bool,
    logprobs: bool,
}

pub(crate) fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

fn truncate_tokens(text: &str, max: usize) -> &str {
    let mut seen = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_token {
                seen += 1;
                if seen == max {
                    return &text[..i];
                }
            }
            in_token = false;
        } else {
            in_token = true;
        }
    }
    text
}

impl ScriptedBackend {
    pub fn new(rules: RuleSet) -> Self {
        Self {
            rules,
            constrained_decoding: true,
            logprobs: true,
        }
    }

    pub fn from_rules(rules: Vec<ScriptRule>) -> Result<Self, LmError> {
        Ok(Self::new(RuleSet::new(rules)?))
    }

    /// Simulates a backend without `allowed_tokens`/`logit_bias` support.
    pub fn without_constrained_decoding(mut self) -> Self {
        self.constrained_decoding = false;
        self
    }

    /// Simulates a backend that cannot return logprobs.
    pub fn without_logprobs(mut self) -> Self {
        self.logprobs = false;
        self
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    fn constrained(
        &self,
        rule: &ScriptRule,
        request: &CompletionRequest,
        rng: &mut impl Rng,
    ) -> String {
        let allowed = request.allowed_tokens.as_ref().expect("caller checked");
        let scored: Vec<(&String, f64)> = allowed
            .iter()
            .map(|tok| {
                let base = rule.token_logits.get(tok).copied().unwrap_or_else(|| {
                    if rule.output_text.as_deref() == Some(tok.as_str()) {
                        0.0
                    } else {
                        MISSING_LOGIT
                    }
                });
                let bias = request.logit_bias.get(tok).copied().unwrap_or(0.0);
                (tok, base + bias)
            })
            .collect();
        if request.temperature == 0.0 {
            // max_by keeps the last maximum; iterate reversed so the first wins.
            return scored
                .iter()
                .rev()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(t, _)| (*t).clone())
                .expect("allowed_tokens non-empty");
        }
        let top = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        if top.is_infinite() {
            return scored
                .iter()
                .find(|s| s.1 == top)
                .map(|(t, _)| (*t).clone())
                .expect("non-empty");
        }
        let weights: Vec<f64> = scored
            .iter()
            .map(|s| ((s.1 - top) / request.temperature).exp())
            .collect();
        scored[pick_weighted(&weights, rng)].0.clone()
    }

    fn free_text(
        &self,
        rule: &ScriptRule,
        request: &CompletionRequest,
        rng: &mut impl Rng,
    ) -> String {
        if request.temperature > 0.0 && !rule.alternatives.is_empty() {
            let weights: Vec<f64> = rule
                .alternatives
                .iter()
                .map(|a| a.weight.powf(1.0 / request.temperature))
                .collect();
            return rule.alternatives[pick_weighted(&weights, rng)].text.clone();
        }
        if let Some(text) = &rule.output_text {
            return text.clone();
        }
        // Highest-weight alternative, first on ties.
        rule.alternatives
            .iter()
            .rev()
            .max_by(|a, b| a.weight.total_cmp(&b.weight))
            .map(|a| a.text.clone())
            .unwrap_or_default()
    }
}

fn pick_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

impl LanguageModel for ScriptedBackend {
    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, LmError> {
        request.validate()?;
        if !self.constrained_decoding
            && (request.allowed_tokens.is_some() || !request.logit_bias.is_empty())
        {
            let feature = if request.allowed_tokens.is_some() {
                "allowed_tokens"
            } else {
                "logit_bias"
            };
            return Err(LmError::capability(feature));
        }
        let rule = self.rules.generation_rule(&request.prompt);
        let stream = if request.temperature > 0.0 {
            request.seed.unwrap_or(0)
        } else {
            0
        };
        let mut rng = seeds::rng(stream, &[seeds::text_hash(&request.prompt)]);

        let text = if request.allowed_tokens.is_some() {
            self.constrained(rule, request, &mut rng)
        } else {
            let raw = self.free_text(rule, request, &mut rng);
            let raw = if raw.contains("{nonce}") {
                raw.replace("{nonce}", &format!("{:08x}", rng.gen::<u32>()))
            } else {
                raw
            };
            let cut = apply_stop_sequences(&raw, &request.stop_sequences);
            truncate_tokens(&cut, request.max_new_tokens as usize).to_string()
        };
        Ok(CompletionResult {
            prompt_tokens: count_tokens(&request.prompt),
            generated_tokens: count_tokens(&text).min(u64::from(request.max_new_tokens)),
            text,
        })
    }

    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, LmError> {
        if !self.logprobs {
            return Err(LmError::capability("logprobs"));
        }
        let n = continuation.split_whitespace().count();
        if n == 0 {
            return Err(LmError::EmptyContinuation);
        }
        let rule = self
            .rules
            .scoring_rule(prompt, continuation)
            .ok_or_else(|| LmError::capability("logprobs (no scoring rule matched)"))?;
        let lps = (0..n).map(|i| rule.logprob_at(i)).collect();
        ScoreResult::from_logprobs(lps, count_tokens(prompt) + n as u64)
    }
}
