//! Chain-of-retrieval question answering.
//!
//! A question is answered by iteratively generating sub-queries, retrieving
//! documents for each, answering them, and finally answering the original
//! question with the accumulated chain as context. The crate covers:
//!
//! - [`prompts`]: the four prompt templates and task descriptions
//! - [`lm`]: the language-model gateway (remote completions, scripted backend)
//! - [`retrieval`]: BM25 index, remote retriever, reciprocal rank fusion
//! - [`chain`]: the chain state machine and per-run token accounting
//! - [`decoding`]: greedy, best-of-N and tree-search decoding
//! - [`sampler`]: rejection sampling of chains and training-instance emission
//! - [`eval`]: EM/F1, recall@k, Pareto frontier, log-linear fits, bootstrap CIs

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod decoding;
pub mod eval;
pub mod exec;
pub mod lm;
pub mod prompts;
pub mod retrieval;
pub mod sampler;
pub mod scenarios;
pub mod seeds;
pub mod transport;

pub use exec::ExecMode;
