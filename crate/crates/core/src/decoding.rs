//! Test-time decoding strategies: greedy, best-of-N, and breadth-first tree
//! search with rollouts.
//!
//! Chains are scored by a penalty: the mean over steps of the log-likelihood
//! of [`NO_INFO_SENTINEL`] under that step's sub-answer prompt. A chain whose
//! documents make "no information" likely is a poor chain, so lower is better.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{
    Backends, ChainError, RetrievalChain, RunTrace, DEFAULT_FINAL_K, DEFAULT_STEP_K,
    NO_INFO_SENTINEL,
};
use crate::exec::{self, ExecMode};
use crate::prompts::TaskDescription;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    BestOfN,
    TreeSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    #[serde(alias = "max_length_L", alias = "L")]
    pub max_length: usize,
    #[serde(alias = "n_chains_N", alias = "N")]
    pub n_chains: usize,
    pub subquery_temperature: f64,
    pub expansion_size: usize,
    pub n_rollouts: usize,
    pub rollout_depth: usize,
    pub stop_bias: Option<f64>,
    pub seed: u64,
    pub step_k: usize,
    pub final_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_length: 6,
            n_chains: 4,
            subquery_temperature: 0.7,
            expansion_size: 4,
            n_rollouts: 2,
            rollout_depth: 2,
            stop_bias: None,
            seed: 0,
            step_k: DEFAULT_STEP_K,
            final_k: DEFAULT_FINAL_K,
        }
    }
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("wrong strategy: expected {expected:?}, config has {found:?}")]
    WrongStrategy { expected: Strategy, found: Strategy },
    #[error("all {} candidate chains failed: {}", .0.len(), .0.join("; "))]
    AllCandidatesFailed(Vec<String>),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

impl DecodeError {
    pub fn is_capability(&self) -> bool {
        matches!(self, DecodeError::Chain(e) if e.is_capability())
    }
}

impl DecodeConfig {
    pub fn greedy(max_length: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_length,
            ..Self::default()
        }
    }

    pub fn best_of_n(max_length: usize, n: usize) -> Self {
        Self {
            strategy: Strategy::BestOfN,
            max_length,
            n_chains: n,
            ..Self::default()
        }
    }

    pub fn tree_search(max_length: usize) -> Self {
        Self {
            strategy: Strategy::TreeSearch,
            max_length,
            ..Self::default()
        }
    }

    /// Greedy decoding is best-of-1 at temperature 0.
    pub fn effective_n(&self) -> usize {
        match self.strategy {
            Strategy::Greedy => 1,
            _ => self.n_chains,
        }
    }

    pub fn effective_temperature(&self) -> f64 {
        match self.strategy {
            Strategy::Greedy => 0.0,
            _ => self.subquery_temperature,
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let fail = |m: &str| Err(DecodeError::Config(m.to_string()));
        if self.n_chains == 0 {
            return fail("n_chains must be positive");
        }
        if !(self.subquery_temperature >= 0.0) || !self.subquery_temperature.is_finite() {
            return fail("subquery_temperature must be finite and >= 0");
        }
        if self.step_k == 0 || self.final_k == 0 {
            return fail("step_k and final_k must be positive");
        }
        if self.stop_bias.is_some_and(f64::is_nan) {
            return fail("stop_bias must not be NaN");
        }
        if self.strategy == Strategy::TreeSearch {
            if self.expansion_size < 2 {
                return fail("tree_search requires expansion_size >= 2");
            }
            if self.n_rollouts == 0 || self.rollout_depth == 0 {
                return fail("n_rollouts and rollout_depth must be positive");
            }
        }
        Ok(())
    }

    /// Short identifier, e.g. `greedy_L6` or `best_of_n_L6_N4`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Greedy => format!("greedy_L{}", self.max_length),
            Strategy::BestOfN => format!("best_of_n_L{}_N{}", self.max_length, self.n_chains),
            Strategy::TreeSearch => format!(
                "tree_search_L{}_E{}_R{}_D{}",
                self.max_length, self.expansion_size, self.n_rollouts, self.rollout_depth
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub chain: RetrievalChain,
    pub all_candidates: Vec<RetrievalChain>,
    /// Covers every LM and retriever call made, including discarded candidates.
    pub trace: RunTrace,
}

/// Mean over steps of log P("No relevant information found" | sub-answer prompt).
pub fn chain_penalty(
    chain: &RetrievalChain,
    backends: &Backends<'_>,
    trace: &mut RunTrace,
) -> Result<f64, ChainError> {
    if chain.is_empty() {
        return Err(ChainError::NoSteps);
    }
    let mut total = 0.0;
    for step in chain.steps() {
        let prompt = backends.subanswer_prompt(step)?;
        total += backends
            .score(&prompt, NO_INFO_SENTINEL, trace)?
            .sum_logprob;
    }
    Ok(total / chain.len() as f64)
}

/// Validates `config` and runs the strategy it selects.
pub fn decode(
    query: &str,
    task: &TaskDescription,
    config: &DecodeConfig,
    backends: &Backends<'_>,
    mode: ExecMode,
) -> Result<DecodeOutcome, DecodeError> {
    config.validate()?;
    match config.strategy {
        Strategy::Greedy => decode_greedy(query, task, config, backends),
        Strategy::BestOfN => decode_best_of_n(query, task, config, backends, mode),
        Strategy::TreeSearch => decode_tree_search(query, task, config, backends, mode),
    }
}

fn candidate_seed(root: u64, candidate: usize, depth: usize) -> u64 {
    seeds::derive(root, &[candidate as u64, depth as u64])
}

/// Runs up to `max_length` steps. A degenerate step ends the chain early;
/// with `stop_bias` set, the stop check runs after each completed step.
fn run_chain(
    query: &str,
    task: &TaskDescription,
    config: &DecodeConfig,
    temperature: f64,
    candidate: usize,
    backends: &Backends<'_>,
    trace: &mut RunTrace,
) -> Result<RetrievalChain, ChainError> {
    let mut chain = RetrievalChain::new(query, task.clone(), config.max_length);
    for depth in 0..config.max_length {
        let seed = candidate_seed(config.seed, candidate, depth);
        match backends.advance(&mut chain, config.step_k, temperature, seed, trace) {
            Ok(()) => {}
            Err(ChainError::Degenerate { last, .. }) => {
                trace.warn(format!(
                    "step {} abandoned: repeated sub-query {last:?}",
                    depth + 1
                ));
                break;
            }
            Err(e) => return Err(e),
        }
        if let Some(bias) = config.stop_bias {
            if backends.should_stop(&chain, bias, trace)? {
                break;
            }
        }
    }
    Ok(chain)
}

pub fn decode_greedy(
    query: &str,
    task: &TaskDescription,
    config: &DecodeConfig,
    backends: &Backends<'_>,
) -> Result<DecodeOutcome, DecodeError> {
    if config.strategy != Strategy::Greedy {
        return Err(DecodeError::WrongStrategy {
            expected: Strategy::Greedy,
            found: config.strategy,
        });
    }
    let mut trace = RunTrace::new();
    let mut chain = run_chain(query, task, config, 0.0, 0, backends, &mut trace)?;
    backends.finalize(&mut chain, config.final_k, &mut trace)?;
    Ok(DecodeOutcome {
        chain,
        all_candidates: Vec::new(),
        trace,
    })
}

/// Index of the smallest penalty; candidates without a penalty rank last,
/// ties go to the lower index.
fn argmin_penalty(penalties: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in penalties.iter().enumerate() {
        let Some(p) = *p else { continue };
        if best.is_none_or(|(_, b)| p < b) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i)
        .or_else(|| (!penalties.is_empty()).then_some(0))
}

pub fn decode_best_of_n(
    query: &str,
    task: &TaskDescription,
    config: &DecodeConfig,
    backends: &Backends<'_>,
    mode: ExecMode,
) -> Result<DecodeOutcome, DecodeError> {
    if config.strategy != Strategy::BestOfN {
        return Err(DecodeError::WrongStrategy {
            expected: Strategy::BestOfN,
            found: config.strategy,
        });
    }
    let n = config.n_chains.max(1);
    let temperature = config.subquery_temperature;
    let runs = exec::map_range(mode, n, |i| {
        let mut trace = RunTrace::new();
        let result = run_chain(query, task, config, temperature, i, backends, &mut trace).and_then(
            |mut chain| {
                // A single candidate needs no selection score.
                if n > 1 && !chain.is_empty() {
                    chain.penalty = Some(chain_penalty(&chain, backends, &mut trace)?);
                }
                Ok(chain)
            },
        );
        (result, trace)
    });

    let mut trace = RunTrace::new();
    let mut candidates = Vec::with_capacity(n);
    let mut errors = Vec::new();
    for (i, (result, t)) in runs.into_iter().enumerate() {
        trace.absorb(t);
        match result {
            Ok(chain) => candidates.push(chain),
            Err(e) if e.is_capability() => return Err(e.into()),
            Err(e) => {
                trace.warn(format!("candidate {i} failed: {e}"));
                errors.push(format!("candidate {i}: {e}"));
            }
        }
    }
    if candidates.is_empty() {
        return Err(DecodeError::AllCandidatesFailed(errors));
    }
    let penalties: Vec<Option<f64>> = candidates.iter().map(|c| c.penalty).collect();
    let winner = argmin_penalty(&penalties).expect("candidates non-empty");
    let mut chain = candidates[winner].clone();
    backends.finalize(&mut chain, config.final_k, &mut trace)?;
    Ok(DecodeOutcome {
        chain,
        all_candidates: candidates,
        trace,
    })
}

/// Number of sub-query/sub-answer rounds tree search spends at one depth
/// when no expansion degenerates.
pub fn tree_search_rounds_per_depth(config: &DecodeConfig) -> usize {
    config.expansion_size * (1 + config.n_rollouts * config.rollout_depth)
}

struct Expansion {
    chain: RetrievalChain,
    mean_penalty: f64,
}

fn expand_and_roll_out(
    state: &RetrievalChain,
    sub_query: &str,
    expansion: usize,
    depth: usize,
    config: &DecodeConfig,
    backends: &Backends<'_>,
    trace: &mut RunTrace,
) -> Result<Expansion, ChainError> {
    let mut expanded = state.clone();
    backends.complete_step(&mut expanded, sub_query.to_string(), config.step_k, trace)?;
    let mut total = 0.0;
    for r in 0..config.n_rollouts {
        let mut rollout = expanded
            .clone()
            .with_max_length(expanded.len() + config.rollout_depth);
        for s in 0..config.rollout_depth {
            let seed = seeds::derive(
                config.seed,
                &[1, depth as u64, expansion as u64, r as u64, s as u64],
            );
            match backends.advance(
                &mut rollout,
                config.step_k,
                config.subquery_temperature,
                seed,
                trace,
            ) {
                Ok(()) => {}
                Err(ChainError::Degenerate { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        total += chain_penalty(&rollout, backends, trace)?;
    }
    let mean_penalty = if config.n_rollouts == 0 {
        chain_penalty(&expanded, backends, trace)?
    } else {
        total / config.n_rollouts as f64
    };
    Ok(Expansion {
        chain: expanded,
        mean_penalty,
    })
}

pub fn decode_tree_search(
    query: &str,
    task: &TaskDescription,
    config: &DecodeConfig,
    backends: &Backends<'_>,
    mode: ExecMode,
) -> Result<DecodeOutcome, DecodeError> {
    if config.strategy != Strategy::TreeSearch {
        return Err(DecodeError::WrongStrategy {
            expected: Strategy::TreeSearch,
            found: config.strategy,
        });
    }
    let mut trace = RunTrace::new();
    let mut state = RetrievalChain::new(query, task.clone(), config.max_length);
    let mut all_candidates = Vec::new();

    for depth in 0..config.max_length {
        trace.set_depth(Some(depth));
        let mut sub_queries: Vec<String> = Vec::with_capacity(config.expansion_size);
        for e in 0..config.expansion_size {
            let seed = seeds::derive(config.seed, &[0, depth as u64, e as u64]);
            match backends.generate_subquery(
                &state,
                &sub_queries,
                config.subquery_temperature,
                seed,
                &mut trace,
            ) {
                Ok(q) => sub_queries.push(q),
                Err(ChainError::Degenerate { .. }) => {
                    trace.warn(format!(
                        "expansion {e} at depth {depth} discarded as duplicate"
                    ));
                }
                Err(e) => return Err(e.into()),
            }
        }
        if sub_queries.is_empty() {
            trace.warn(format!(
                "all expansions at depth {depth} degenerate; finalizing current state"
            ));
            break;
        }

        let results = exec::map_indexed(mode, &sub_queries, |e, q| {
            let mut t = RunTrace::at_depth(depth);
            let r = expand_and_roll_out(&state, q, e, depth, config, backends, &mut t);
            (r, t)
        });
        let mut expansions = Vec::with_capacity(results.len());
        for (r, t) in results {
            trace.absorb(t);
            expansions.push(r?);
        }
        let penalties: Vec<Option<f64>> = expansions.iter().map(|x| Some(x.mean_penalty)).collect();
        let best = argmin_penalty(&penalties).expect("expansions non-empty");
        for x in &mut expansions {
            x.chain.penalty = Some(x.mean_penalty);
        }
        state = expansions[best].chain.clone();
        all_candidates.extend(expansions.into_iter().map(|x| x.chain));

        if let Some(bias) = config.stop_bias {
            if backends.should_stop(&state, bias, &mut trace)? {
                break;
            }
        }
    }
    trace.set_depth(None);
    backends.finalize(&mut state, config.final_k, &mut trace)?;
    Ok(DecodeOutcome {
        chain: state,
        all_candidates,
        trace,
    })
}
