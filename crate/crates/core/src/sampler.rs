//! Rejection sampling of retrieval chains and training-instance emission.
//!
//! For each QA pair, chains are sampled one at a time with a random length
//! cap. A chain stops early once a sub-answer matches the gold answer or the
//! gold answer becomes likely enough under the final-answer prompt; the first
//! such success ends sampling for the instance. The chain under which the
//! gold answer is most likely is kept and expanded into training instances.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{Backends, ChainError, ChainRecord, RetrievalChain, RunTrace};
use crate::eval::exact_match;
use crate::lm::ScoreResult;
use crate::prompts::TaskDescription;
use crate::retrieval::{Document, RankedList};
use crate::seeds;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("instance has no gold answer")]
    NoAnswer,
    #[error("no chain completed: {}", .0.join("; "))]
    NoChains(Vec<String>),
    #[error("no candidate chains to select from")]
    NoCandidates,
    #[error(transparent)]
    Chain(#[from] ChainError),
}

impl SampleError {
    pub fn is_capability(&self) -> bool {
        matches!(self, SampleError::Chain(e) if e.is_capability())
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

/// A question with its gold answers. The first answer is the one scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub query: String,
    #[serde(alias = "answer", deserialize_with = "one_or_many")]
    pub answers: Vec<String>,
    pub dataset_id: String,
}

impl QAInstance {
    pub fn new(
        query: impl Into<String>,
        answer: impl Into<String>,
        dataset_id: impl Into<String>,
    ) -> Self {
        Self {
            query: query.into(),
            answers: vec![answer.into()],
            dataset_id: dataset_id.into(),
        }
    }

    /// The gold answer used for likelihood scoring.
    pub fn primary_answer(&self) -> Result<&str, SampleError> {
        self.answers
            .first()
            .map(String::as_str)
            .filter(|a| !a.trim().is_empty())
            .ok_or(SampleError::NoAnswer)
    }

    /// Stable id used to resume runs: hash of query and dataset id.
    pub fn id(&self) -> String {
        instance_id(&self.query, &self.dataset_id)
    }
}

pub fn instance_id(query: &str, dataset_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(query.as_bytes());
    h.update([0u8]);
    h.update(dataset_id.as_bytes());
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub max_chains: usize,
    pub length_range: (usize, usize),
    pub subquery_temperature: f64,
    pub step_k: usize,
    pub final_k: usize,
    /// A chain succeeds once the gold answer's average token logprob exceeds this.
    pub logprob_threshold: f64,
    pub subtask_sample_ratio: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            max_chains: 16,
            length_range: (1, 5),
            subquery_temperature: 0.7,
            step_k: crate::chain::DEFAULT_STEP_K,
            final_k: crate::chain::DEFAULT_FINAL_K,
            logprob_threshold: -0.05,
            subtask_sample_ratio: 0.2,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        let (lo, hi) = self.length_range;
        if self.max_chains == 0 {
            return Err(SampleError::Config("max_chains must be at least 1".into()));
        }
        if lo == 0 || lo > hi {
            return Err(SampleError::Config(format!(
                "length_range ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        if !(0.0..=1.0).contains(&self.subtask_sample_ratio) {
            return Err(SampleError::Config(format!(
                "subtask_sample_ratio {} outside [0, 1]",
                self.subtask_sample_ratio
            )));
        }
        if self.step_k == 0 || self.final_k == 0 {
            return Err(SampleError::Config(
                "step_k and final_k must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Length cap of chain `index`, uniform over `length_range`.
    pub fn draw_max_length(&self, index: usize) -> usize {
        let (lo, hi) = self.length_range;
        seeds::rng(self.seed, &[0, index as u64]).gen_range(lo..=hi)
    }

    fn step_seed(&self, index: usize, depth: usize) -> u64 {
        seeds::derive(self.seed, &[1, index as u64, depth as u64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// A sub-answer matched a gold answer.
    AnswerMatch,
    /// The gold answer's average logprob crossed the threshold.
    Likelihood,
    /// The drawn length cap was reached.
    MaxLength,
    /// No new sub-query could be generated.
    Degenerate,
}

impl Termination {
    pub fn is_success(self) -> bool {
        matches!(self, Termination::AnswerMatch | Termination::Likelihood)
    }
}

#[derive(Debug, Clone)]
pub struct SampledChain {
    pub chain: RetrievalChain,
    pub termination: Termination,
}

/// Memoizes continuation scores by (prompt, continuation). Hits are free and
/// are not charged to any trace.
#[derive(Debug, Default)]
pub struct ScoreCache {
    entries: Mutex<HashMap<(String, String), ScoreResult>>,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("score cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn score(
        &self,
        backends: &Backends<'_>,
        prompt: &str,
        continuation: &str,
        trace: &mut RunTrace,
    ) -> Result<ScoreResult, ChainError> {
        let key = (prompt.to_string(), continuation.to_string());
        if let Some(hit) = self.entries.lock().expect("score cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let out = backends.score(prompt, continuation, trace)?;
        self.entries
            .lock()
            .expect("score cache poisoned")
            .insert(key, out.clone());
        Ok(out)
    }
}

/// Scores the gold answer after the first `prefix` steps of `chain`, under
/// the final-answer prompt with `final_docs` for the original query.
pub fn score_answer(
    chain: &RetrievalChain,
    prefix: usize,
    answer: &str,
    final_docs: &[&Document],
    backends: &Backends<'_>,
    cache: &ScoreCache,
    trace: &mut RunTrace,
) -> Result<ScoreResult, ChainError> {
    let prompt = backends.templates.render_final_prompt(
        &chain.query,
        &chain.history_prefix(prefix),
        final_docs,
        &chain.task,
    );
    cache.score(backends, &prompt, answer, trace)
}

/// Samples chains for `qa` until one succeeds or `max_chains` are drawn.
/// A chain whose LM or retriever call fails is dropped; sampling fails only
/// if no chain completes.
pub fn sample_chains(
    qa: &QAInstance,
    task: &TaskDescription,
    final_docs: &[&Document],
    config: &SamplerConfig,
    backends: &Backends<'_>,
    cache: &ScoreCache,
    trace: &mut RunTrace,
) -> Result<Vec<SampledChain>, SampleError> {
    config.validate()?;
    let answer = qa.primary_answer()?;
    let mut chains = Vec::new();
    let mut errors = Vec::new();
    for index in 0..config.max_chains {
        let max_length = config.draw_max_length(index);
        let mut chain = RetrievalChain::new(qa.query.clone(), task.clone(), max_length);
        let mut termination = Termination::MaxLength;
        let mut failed = None;
        for depth in 0..max_length {
            let seed = config.step_seed(index, depth);
            match backends.advance(
                &mut chain,
                config.step_k,
                config.subquery_temperature,
                seed,
                trace,
            ) {
                Ok(()) => {}
                Err(ChainError::Degenerate { .. }) => {
                    termination = Termination::Degenerate;
                    break;
                }
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
            let last = &chain.steps()[chain.len() - 1];
            if exact_match(&last.sub_answer, &qa.answers) == 1 {
                termination = Termination::AnswerMatch;
                break;
            }
            match score_answer(
                &chain,
                chain.len(),
                answer,
                final_docs,
                backends,
                cache,
                trace,
            ) {
                Ok(s) if s.avg_logprob > config.logprob_threshold => {
                    termination = Termination::Likelihood;
                    break;
                }
                Ok(_) => {}
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failed {
            if e.is_capability() {
                return Err(e.into());
            }
            trace.warn(format!("chain {index} dropped: {e}"));
            errors.push(format!("chain {index}: {e}"));
            continue;
        }
        chains.push(SampledChain { chain, termination });
        if termination.is_success() {
            break;
        }
    }
    if chains.is_empty() {
        return Err(SampleError::NoChains(errors));
    }
    Ok(chains)
}

/// The selected chain for one QA pair, with the documents retrieved for the
/// original query.
#[derive(Debug, Clone)]
pub struct AugmentedInstance {
    pub qa: QAInstance,
    pub chain: RetrievalChain,
    pub final_docs: RankedList,
    /// Sum logprob of the gold answer given this chain; the selection score.
    pub answer_logprob: f64,
    pub termination: Option<Termination>,
}

/// Index of the highest score; ties go to the shorter chain, then the lower index.
pub fn argmax_answer_logprob(scores: &[(f64, usize)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(score, len)) in scores.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let (bs, bl) = scores[b];
                score > bs || (score == bs && len < bl)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Keeps the candidate under which the gold answer is most likely.
pub fn select_best_chain(
    candidates: &[RetrievalChain],
    qa: &QAInstance,
    final_docs: &RankedList,
    backends: &Backends<'_>,
    cache: &ScoreCache,
    trace: &mut RunTrace,
) -> Result<AugmentedInstance, SampleError> {
    if candidates.is_empty() {
        return Err(SampleError::NoCandidates);
    }
    let answer = qa.primary_answer()?;
    let docs = backends
        .retriever
        .resolve(final_docs)
        .map_err(ChainError::from)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        let s = score_answer(c, c.len(), answer, &docs, backends, cache, trace)?;
        scores.push((s.sum_logprob, c.len()));
    }
    let best = argmax_answer_logprob(&scores).expect("candidates non-empty");
    let mut chain = candidates[best].clone();
    chain.answer_logprob = Some(scores[best].0);
    Ok(AugmentedInstance {
        qa: qa.clone(),
        chain,
        final_docs: final_docs.clone(),
        answer_logprob: scores[best].0,
        termination: None,
    })
}

/// Samples, selects and returns the augmented instance for one QA pair.
pub fn augment(
    qa: &QAInstance,
    task: &TaskDescription,
    config: &SamplerConfig,
    backends: &Backends<'_>,
    cache: &ScoreCache,
    trace: &mut RunTrace,
) -> Result<(AugmentedInstance, usize), SampleError> {
    let final_docs = backends
        .search(&qa.query, config.final_k, trace)
        .map_err(ChainError::from)?;
    let docs = backends
        .retriever
        .resolve(&final_docs)
        .map_err(ChainError::from)?;
    let sampled = sample_chains(qa, task, &docs, config, backends, cache, trace)?;
    let count = sampled.len();
    let chains: Vec<RetrievalChain> = sampled.iter().map(|s| s.chain.clone()).collect();
    let mut aug = select_best_chain(&chains, qa, &final_docs, backends, cache, trace)?;
    let winner = sampled
        .iter()
        .find(|s| s.chain.steps() == aug.chain.steps())
        .map(|s| s.termination);
    aug.termination = winner;
    Ok((aug, count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub id: String,
    pub dataset_id: String,
    pub answers: Vec<String>,
    #[serde(flatten)]
    pub chain: ChainRecord,
    pub termination: Option<Termination>,
    pub chains_sampled: usize,
}

impl AugmentedInstance {
    pub fn to_record(&self, trace: &RunTrace, chains_sampled: usize) -> AugmentedRecord {
        let mut chain = self.chain.to_record(&trace.totals());
        chain.final_doc_ids = self.final_docs.doc_ids().map(str::to_string).collect();
        chain.answer_logprob = Some(self.answer_logprob);
        AugmentedRecord {
            id: self.qa.id(),
            dataset_id: self.qa.dataset_id.clone(),
            answers: self.qa.answers.clone(),
            chain,
            termination: self.termination,
            chains_sampled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingTask {
    SubQueryPrediction,
    SubAnswerPrediction,
    FinalAnswerPrediction,
    StopPrediction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub task: TrainingTask,
    pub prompt: String,
    pub target: String,
}

/// Gold-answer sum logprob after each prefix length 0..=L.
pub fn prefix_scores(
    aug: &AugmentedInstance,
    backends: &Backends<'_>,
    cache: &ScoreCache,
    trace: &mut RunTrace,
) -> Result<Vec<f64>, SampleError> {
    let answer = aug.qa.primary_answer()?;
    let docs = backends
        .retriever
        .resolve(&aug.final_docs)
        .map_err(ChainError::from)?;
    (0..=aug.chain.len())
        .map(|n| {
            score_answer(&aug.chain, n, answer, &docs, backends, cache, trace)
                .map(|s| s.sum_logprob)
                .map_err(SampleError::from)
        })
        .collect()
}

/// Expands an augmented instance into training instances.
///
/// Each step yields a sub-query and a sub-answer instance, each kept with
/// probability `ratio`. One final-answer instance is always emitted. Every
/// prefix 0..=L yields a stop instance, labelled "Yes" only for the prefix
/// under which the gold answer is most likely (shortest on ties).
pub fn emit_training_instances(
    aug: &AugmentedInstance,
    ratio: f64,
    seed: u64,
    backends: &Backends<'_>,
    cache: &ScoreCache,
    trace: &mut RunTrace,
) -> Result<Vec<TrainingInstance>, SampleError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(SampleError::Config(format!(
            "subtask_sample_ratio {ratio} outside [0, 1]"
        )));
    }
    let answer = aug.qa.primary_answer()?.to_string();
    let chain = &aug.chain;
    let templates = backends.templates;
    let mut rng = seeds::rng(seed, &[]);
    let mut out = Vec::new();

    for (i, step) in chain.steps().iter().enumerate() {
        if rng.gen_bool(ratio) {
            out.push(TrainingInstance {
                task: TrainingTask::SubQueryPrediction,
                prompt: templates.render_subquery_prompt(
                    &chain.query,
                    &chain.history_prefix(i),
                    &chain.task,
                ),
                target: step.sub_query.clone(),
            });
        }
        if rng.gen_bool(ratio) {
            out.push(TrainingInstance {
                task: TrainingTask::SubAnswerPrediction,
                prompt: backends.subanswer_prompt(step)?,
                target: step.sub_answer.clone(),
            });
        }
    }

    let docs = backends
        .retriever
        .resolve(&aug.final_docs)
        .map_err(ChainError::from)?;
    out.push(TrainingInstance {
        task: TrainingTask::FinalAnswerPrediction,
        prompt: templates.render_final_prompt(&chain.query, &chain.history(), &docs, &chain.task),
        target: answer,
    });

    let scores = prefix_scores(aug, backends, cache, trace)?;
    let keyed: Vec<(f64, usize)> = scores.iter().enumerate().map(|(n, s)| (*s, n)).collect();
    let best = argmax_answer_logprob(&keyed);
    for (n, score) in scores.iter().enumerate().take(chain.len() + 1) {
        let label = if Some(n) == best && score.is_finite() {
            "Yes"
        } else {
            "No"
        };
        out.push(TrainingInstance {
            task: TrainingTask::StopPrediction,
            prompt: templates.render_stop_prompt(&chain.query, &chain.history_prefix(n)),
            target: label.to_string(),
        });
    }
    Ok(out)
}
