//! The retrieval-chain state machine.
//!
//! A chain starts from the original query, grows one step at a time
//! (sub-query → retrieve → sub-answer), and is frozen once a final answer is
//! produced. Every LM and retriever call is charged to a [`RunTrace`].

use std::collections::{BTreeSet, HashSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{CompletionRequest, CompletionResult, LanguageModel, LmError, ScoreResult};
use crate::prompts::{HistoryStep, PromptTemplates, TaskDescription};
use crate::retrieval::{RankedList, RetrievalError, Retriever};
use crate::seeds;

/// The sub-answer the model is asked to give when documents do not help.
pub const NO_INFO_SENTINEL: &str = "No relevant information found";

pub const DEFAULT_STEP_K: usize = 5;
pub const DEFAULT_FINAL_K: usize = 20;
/// Regenerations allowed after a duplicate sub-query before the step is abandoned.
pub const DUPLICATE_RETRIES: u32 = 3;

const SUBQUERY_MAX_TOKENS: u32 = 64;
const SUBANSWER_MAX_TOKENS: u32 = 64;
const FINAL_MAX_TOKENS: u32 = 64;
const LINE_STOP: &str = "\n";

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("chain is frozen: a final answer was already produced")]
    Frozen,
    #[error("chain already has the maximum {max} steps")]
    MaxLength { max: usize },
    #[error("degenerate generation: no new sub-query after {attempts} attempts (last {last:?})")]
    Degenerate { attempts: u32, last: String },
    #[error("chain has no steps")]
    NoSteps,
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

impl ChainError {
    /// The backend lacks a feature the operation needs; retrying cannot help.
    pub fn is_capability(&self) -> bool {
        matches!(self, ChainError::Lm(LmError::Capability { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStep {
    pub sub_query: String,
    pub retrieved: RankedList,
    pub sub_answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalChain {
    pub query: String,
    pub task: TaskDescription,
    steps: Vec<ChainStep>,
    max_length: usize,
    final_answer: Option<String>,
    final_retrieval: Option<RankedList>,
    pub penalty: Option<f64>,
    pub answer_logprob: Option<f64>,
}

impl RetrievalChain {
    pub fn new(query: impl Into<String>, task: TaskDescription, max_length: usize) -> Self {
        Self {
            query: query.into(),
            task,
            steps: Vec::new(),
            max_length,
            final_answer: None,
            final_retrieval: None,
            penalty: None,
            answer_logprob: None,
        }
    }

    pub fn steps(&self) -> &[ChainStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn is_frozen(&self) -> bool {
        self.final_answer.is_some()
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.final_answer.as_deref()
    }

    /// Documents retrieved for the original query at finalization.
    pub fn final_retrieval(&self) -> Option<&RankedList> {
        self.final_retrieval.as_ref()
    }

    pub fn history(&self) -> Vec<HistoryStep<'_>> {
        self.history_prefix(self.steps.len())
    }

    pub fn history_prefix(&self, n: usize) -> Vec<HistoryStep<'_>> {
        self.steps[..n]
            .iter()
            .map(|s| HistoryStep {
                sub_query: &s.sub_query,
                sub_answer: &s.sub_answer,
            })
            .collect()
    }

    pub fn has_sub_query(&self, q: &str) -> bool {
        self.steps.iter().any(|s| s.sub_query == q)
    }

    /// A copy of the first `n` steps, unfrozen.
    pub fn prefix(&self, n: usize) -> RetrievalChain {
        let mut c = RetrievalChain::new(self.query.clone(), self.task.clone(), self.max_length);
        c.steps = self.steps[..n.min(self.steps.len())].to_vec();
        c
    }

    /// Same steps, with the length cap raised to `max_length`.
    pub fn with_max_length(mut self, max_length: usize) -> Self {
        self.max_length = max_length.max(self.steps.len());
        self
    }

    /// Appends an externally produced step (e.g. a chain read back from disk).
    pub fn push_step(&mut self, step: ChainStep) -> Result<(), ChainError> {
        self.check_open()?;
        self.steps.push(step);
        Ok(())
    }

    fn check_open(&self) -> Result<(), ChainError> {
        if self.is_frozen() {
            return Err(ChainError::Frozen);
        }
        if self.steps.len() >= self.max_length {
            return Err(ChainError::MaxLength {
                max: self.max_length,
            });
        }
        Ok(())
    }

    pub fn to_record(&self, trace: &TraceTotals) -> ChainRecord {
        ChainRecord {
            query: self.query.clone(),
            task: self.task.clone(),
            steps: self
                .steps
                .iter()
                .map(|s| StepRecord {
                    sub_query: s.sub_query.clone(),
                    sub_answer: s.sub_answer.clone(),
                    doc_ids: s.retrieved.doc_ids().map(str::to_string).collect(),
                })
                .collect(),
            final_answer: self.final_answer.clone(),
            penalty: self.penalty,
            answer_logprob: self.answer_logprob,
            trace: *trace,
            final_doc_ids: self
                .final_retrieval
                .as_ref()
                .map(|r| r.doc_ids().map(str::to_string).collect())
                .unwrap_or_default(),
        }
    }
}

/// JSON-lines persistence form of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub query: String,
    pub task: TaskDescription,
    pub steps: Vec<StepRecord>,
    pub final_answer: Option<String>,
    pub penalty: Option<f64>,
    pub answer_logprob: Option<f64>,
    pub trace: TraceTotals,
    #[serde(default)]
    pub final_doc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub sub_query: String,
    pub sub_answer: String,
    pub doc_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    SubQuery,
    Retrieve,
    SubAnswer,
    StopCheck,
    FinalAnswer,
    Score,
    Warning,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEvent {
    pub op: Operation,
    pub prompt_tokens: u64,
    pub generated_tokens: u64,
    pub retriever_calls: u64,
    /// Search depth the event belongs to, when a decoder tags it.
    pub depth: Option<usize>,
    pub note: Option<String>,
    pub duration: Duration,
}

/// Wall-clock duration is excluded from equality.
impl PartialEq for TraceEvent {
    fn eq(&self, other: &Self) -> bool {
        self.op == other.op
            && self.prompt_tokens == other.prompt_tokens
            && self.generated_tokens == other.generated_tokens
            && self.retriever_calls == other.retriever_calls
            && self.depth == other.depth
            && self.note == other.note
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceTotals {
    pub prompt_tokens: u64,
    pub generated_tokens: u64,
    pub retriever_calls: u64,
}

impl TraceTotals {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.generated_tokens
    }
}

/// Per-run accounting: counters plus the event log they are summed from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    totals: TraceTotals,
    events: Vec<TraceEvent>,
    depth: Option<usize>,
}

impl RunTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// A trace whose events are tagged with `depth`.
    pub fn at_depth(depth: usize) -> Self {
        Self {
            depth: Some(depth),
            ..Self::default()
        }
    }

    pub fn set_depth(&mut self, depth: Option<usize>) {
        self.depth = depth;
    }

    pub fn totals(&self) -> TraceTotals {
        self.totals
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    fn push(&mut self, event: TraceEvent) {
        self.totals.prompt_tokens += event.prompt_tokens;
        self.totals.generated_tokens += event.generated_tokens;
        self.totals.retriever_calls += event.retriever_calls;
        self.events.push(event);
    }

    pub fn record_generation(
        &mut self,
        op: Operation,
        result: &CompletionResult,
        duration: Duration,
    ) {
        self.push(TraceEvent {
            op,
            prompt_tokens: result.prompt_tokens,
            generated_tokens: result.generated_tokens,
            retriever_calls: 0,
            depth: self.depth,
            note: None,
            duration,
        });
    }

    pub fn record_score(&mut self, result: &ScoreResult, duration: Duration) {
        self.push(TraceEvent {
            op: Operation::Score,
            prompt_tokens: result.prompt_tokens,
            generated_tokens: 0,
            retriever_calls: 0,
            depth: self.depth,
            note: None,
            duration,
        });
    }

    pub fn record_retrieval(&mut self, duration: Duration) {
        self.push(TraceEvent {
            op: Operation::Retrieve,
            prompt_tokens: 0,
            generated_tokens: 0,
            retriever_calls: 1,
            depth: self.depth,
            note: None,
            duration,
        });
    }

    pub fn warn(&mut self, note: impl Into<String>) {
        let note = note.into();
        tracing::debug!(%note, "trace warning");
        self.push(TraceEvent {
            op: Operation::Warning,
            prompt_tokens: 0,
            generated_tokens: 0,
            retriever_calls: 0,
            depth: self.depth,
            note: Some(note),
            duration: Duration::ZERO,
        });
    }

    /// Appends every event of `other`, keeping their depth tags.
    pub fn absorb(&mut self, other: RunTrace) {
        for e in other.events {
            self.push(e);
        }
    }

    pub fn count(&self, op: Operation) -> usize {
        self.events.iter().filter(|e| e.op == op).count()
    }

    pub fn count_at_depth(&self, op: Operation, depth: usize) -> usize {
        self.events
            .iter()
            .filter(|e| e.op == op && e.depth == Some(depth))
            .count()
    }

    pub fn warnings(&self) -> impl Iterator<Item = &str> {
        self.events.iter().filter_map(|e| e.note.as_deref())
    }
}

/// LM, retriever and templates shared by every chain operation.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub lm: &'a dyn LanguageModel,
    pub retriever: &'a dyn Retriever,
    pub templates: &'a PromptTemplates,
}

impl<'a> Backends<'a> {
    pub fn new(lm: &'a dyn LanguageModel, retriever: &'a dyn Retriever) -> Self {
        Self {
            lm,
            retriever,
            templates: PromptTemplates::builtin(),
        }
    }

    pub fn with_templates(mut self, templates: &'a PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn generate(
        &self,
        op: Operation,
        request: &CompletionRequest,
        trace: &mut RunTrace,
    ) -> Result<CompletionResult, LmError> {
        let start = Instant::now();
        let out = self.lm.generate(request)?;
        trace.record_generation(op, &out, start.elapsed());
        Ok(out)
    }

    pub fn score(
        &self,
        prompt: &str,
        continuation: &str,
        trace: &mut RunTrace,
    ) -> Result<ScoreResult, LmError> {
        let start = Instant::now();
        let out = self.lm.score_continuation(prompt, continuation)?;
        trace.record_score(&out, start.elapsed());
        Ok(out)
    }

    pub fn search(
        &self,
        query: &str,
        k: usize,
        trace: &mut RunTrace,
    ) -> Result<RankedList, RetrievalError> {
        let start = Instant::now();
        let out = self.retriever.search(query, k)?;
        trace.record_retrieval(start.elapsed());
        Ok(out)
    }

    /// Generates a sub-query that differs from every sub-query already in the
    /// chain and from `exclude`. Duplicates (and empty outputs) are discarded
    /// and regenerated up to [`DUPLICATE_RETRIES`] times.
    pub fn generate_subquery(
        &self,
        chain: &RetrievalChain,
        exclude: &[String],
        temperature: f64,
        seed: u64,
        trace: &mut RunTrace,
    ) -> Result<String, ChainError> {
        chain.check_open()?;
        let prompt =
            self.templates
                .render_subquery_prompt(&chain.query, &chain.history(), &chain.task);
        let mut last = String::new();
        for attempt in 0..=DUPLICATE_RETRIES {
            let request = CompletionRequest::new(prompt.clone())
                .temperature(temperature)
                .max_new_tokens(SUBQUERY_MAX_TOKENS)
                .stop(LINE_STOP)
                .seed(seeds::derive(seed, &[u64::from(attempt)]));
            let out = self.generate(Operation::SubQuery, &request, trace)?;
            let candidate = out.text.trim().to_string();
            if !candidate.is_empty()
                && !chain.has_sub_query(&candidate)
                && !exclude.contains(&candidate)
            {
                return Ok(candidate);
            }
            last = candidate;
        }
        Err(ChainError::Degenerate {
            attempts: DUPLICATE_RETRIES + 1,
            last,
        })
    }

    /// Retrieves for `sub_query`, answers it at temperature 0 and appends the step.
    pub fn complete_step(
        &self,
        chain: &mut RetrievalChain,
        sub_query: String,
        step_k: usize,
        trace: &mut RunTrace,
    ) -> Result<(), ChainError> {
        chain.check_open()?;
        let retrieved = self.search(&sub_query, step_k, trace)?;
        let docs = self.retriever.resolve(&retrieved)?;
        let prompt = self
            .templates
            .render_subanswer_prompt_lenient(&sub_query, &docs);
        let request = CompletionRequest::new(prompt)
            .temperature(0.0)
            .max_new_tokens(SUBANSWER_MAX_TOKENS)
            .stop(LINE_STOP);
        let out = self.generate(Operation::SubAnswer, &request, trace)?;
        chain.steps.push(ChainStep {
            sub_query,
            retrieved,
            sub_answer: out.text.trim().to_string(),
        });
        Ok(())
    }

    /// One full step: sub-query at `temperature`, retrieval, sub-answer at 0.
    /// The chain is unchanged on error.
    pub fn advance(
        &self,
        chain: &mut RetrievalChain,
        step_k: usize,
        temperature: f64,
        seed: u64,
        trace: &mut RunTrace,
    ) -> Result<(), ChainError> {
        let sub_query = self.generate_subquery(chain, &[], temperature, seed, trace)?;
        self.complete_step(chain, sub_query, step_k, trace)
    }

    /// Retrieves top `final_k` documents for the original query and answers
    /// it with the whole history at temperature 0, then freezes the chain.
    pub fn finalize(
        &self,
        chain: &mut RetrievalChain,
        final_k: usize,
        trace: &mut RunTrace,
    ) -> Result<(), ChainError> {
        if chain.is_frozen() {
            return Err(ChainError::Frozen);
        }
        let retrieved = self.search(&chain.query, final_k, trace)?;
        let docs = self.retriever.resolve(&retrieved)?;
        let prompt =
            self.templates
                .render_final_prompt(&chain.query, &chain.history(), &docs, &chain.task);
        let request = CompletionRequest::new(prompt)
            .temperature(0.0)
            .max_new_tokens(FINAL_MAX_TOKENS)
            .stop(LINE_STOP);
        let out = self.generate(Operation::FinalAnswer, &request, trace)?;
        chain.final_answer = Some(out.text.trim().to_string());
        chain.final_retrieval = Some(retrieved);
        Ok(())
    }

    /// Asks whether the gathered steps suffice. Decoding is constrained to
    /// `Yes`/`No` with `yes_bias` added to the `Yes` logit.
    pub fn should_stop(
        &self,
        chain: &RetrievalChain,
        yes_bias: f64,
        trace: &mut RunTrace,
    ) -> Result<bool, ChainError> {
        if chain.is_frozen() {
            return Err(ChainError::Frozen);
        }
        let prompt = self
            .templates
            .render_stop_prompt(&chain.query, &chain.history());
        let request = CompletionRequest::new(prompt)
            .temperature(0.0)
            .max_new_tokens(1)
            .allow(["Yes", "No"])
            .bias("Yes", yes_bias);
        let out = self.generate(Operation::StopCheck, &request, trace)?;
        Ok(out.text == "Yes")
    }

    /// Renders the sub-answer prompt step `i` was answered with.
    pub fn subanswer_prompt(&self, step: &ChainStep) -> Result<String, ChainError> {
        let docs = self.retriever.resolve(&step.retrieved)?;
        Ok(self
            .templates
            .render_subanswer_prompt_lenient(&step.sub_query, &docs))
    }
}

/// True iff no two steps share a sub-query.
pub fn sub_queries_unique(chain: &RetrievalChain) -> bool {
    let set: HashSet<&str> = chain.steps.iter().map(|s| s.sub_query.as_str()).collect();
    set.len() == chain.steps.len()
}

/// All doc ids retrieved anywhere in the chain, sorted.
pub fn retrieved_doc_ids(chain: &RetrievalChain) -> BTreeSet<String> {
    chain
        .steps
        .iter()
        .flat_map(|s| s.retrieved.doc_ids())
        .chain(chain.final_retrieval.iter().flat_map(|r| r.doc_ids()))
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ScriptRule, ScriptedBackend};
    use crate::retrieval::{Bm25Index, Document};

    fn task() -> TaskDescription {
        TaskDescription::new("hotpotqa", "answer multi-hop questions").unwrap()
    }

    fn index() -> Bm25Index {
        Bm25Index::build(vec![
            Document::new("a", "Alpha", "alpha facts about things"),
            Document::new("b", "Beta", "beta facts"),
        ])
        .unwrap()
    }

    #[test]
    fn advance_finalize_and_freeze() {
        let lm = ScriptedBackend::from_rules(vec![
            ScriptRule::on("## Main query to answer").output("alpha?"),
            ScriptRule::on("## Query\nalpha?").output("things"),
            ScriptRule::on("## Main query\n").output("final"),
            ScriptRule::on("").output("?"),
        ])
        .unwrap();
        let idx = index();
        let b = Backends::new(&lm, &idx);
        let mut trace = RunTrace::new();
        let mut chain = RetrievalChain::new("Q", task(), 3);
        b.advance(&mut chain, 5, 0.0, 1, &mut trace).unwrap();
        assert_eq!(chain.steps()[0].sub_query, "alpha?");
        assert_eq!(chain.steps()[0].sub_answer, "things");
        assert_eq!(chain.steps()[0].retrieved.entries()[0].doc_id, "a");

        // Deterministic duplicate at temperature 0 exhausts the retry budget.
        let before = trace.count(Operation::SubQuery);
        match b.advance(&mut chain, 5, 0.0, 1, &mut trace) {
            Err(ChainError::Degenerate { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(trace.count(Operation::SubQuery) - before, 4);
        assert_eq!(chain.len(), 1);

        b.finalize(&mut chain, 20, &mut trace).unwrap();
        assert_eq!(chain.final_answer(), Some("final"));
        assert!(matches!(
            b.finalize(&mut chain, 20, &mut trace),
            Err(ChainError::Frozen)
        ));
        assert!(matches!(
            b.advance(&mut chain, 5, 0.0, 1, &mut trace),
            Err(ChainError::Frozen)
        ));
        assert!(matches!(
            b.should_stop(&chain, 0.0, &mut trace),
            Err(ChainError::Frozen)
        ));
        let t = trace.totals();
        let sum: u64 = trace.events().iter().map(|e| e.prompt_tokens).sum();
        assert_eq!(t.prompt_tokens, sum);
        assert_eq!(t.retriever_calls, 2);
    }

    #[test]
    fn max_length_is_enforced() {
        let lm = ScriptedBackend::from_rules(vec![ScriptRule::on("").output("x {nonce}")]).unwrap();
        let idx = index();
        let b = Backends::new(&lm, &idx);
        let mut trace = RunTrace::new();
        let mut chain = RetrievalChain::new("Q", task(), 1);
        b.advance(&mut chain, 5, 0.7, 1, &mut trace).unwrap();
        assert!(matches!(
            b.advance(&mut chain, 5, 0.7, 2, &mut trace),
            Err(ChainError::MaxLength { max: 1 })
        ));
    }

    #[test]
    fn empty_retrieval_keeps_chain_alive() {
        let lm = ScriptedBackend::from_rules(vec![
            ScriptRule::on("(no documents retrieved)").output(NO_INFO_SENTINEL),
            ScriptRule::on("## Main query to answer").output("zzz unrelated?"),
            ScriptRule::on("").output("?"),
        ])
        .unwrap();
        let idx = index();
        let b = Backends::new(&lm, &idx);
        let mut trace = RunTrace::new();
        let mut chain = RetrievalChain::new("Q", task(), 2);
        b.advance(&mut chain, 5, 0.0, 0, &mut trace).unwrap();
        assert!(chain.steps()[0].retrieved.is_empty());
        assert_eq!(chain.steps()[0].sub_answer, NO_INFO_SENTINEL);
    }

    #[test]
    fn stop_check_follows_bias() {
        let lm = ScriptedBackend::from_rules(vec![
            ScriptRule::on("judge whether")
                .logit("Yes", -2.0)
                .logit("No", 0.0),
            ScriptRule::on("").output("?"),
        ])
        .unwrap();
        let idx = index();
        let b = Backends::new(&lm, &idx);
        let chain = RetrievalChain::new("Q", task(), 2);
        let mut trace = RunTrace::new();
        assert!(!b.should_stop(&chain, 0.0, &mut trace).unwrap());
        assert!(b.should_stop(&chain, 3.0, &mut trace).unwrap());
        assert!(b.should_stop(&chain, 1e9, &mut trace).unwrap());
        assert!(!b.should_stop(&chain, -1e9, &mut trace).unwrap());
        assert_eq!(trace.count(Operation::StopCheck), 4);
        assert!(trace.totals().prompt_tokens > 0);

        let strict = lm.without_constrained_decoding();
        let b = Backends::new(&strict, &idx);
        assert!(matches!(
            b.should_stop(&chain, 0.0, &mut trace),
            Err(ChainError::Lm(LmError::Capability { .. }))
        ));
    }
}
