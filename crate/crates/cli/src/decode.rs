use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use chainrag::chain::{Backends, ChainRecord, Operation, RetrievalChain, TraceEvent};
use chainrag::decoding::{decode, DecodeConfig};
use chainrag::eval::{exact_match, f1, recall_at_k};
use chainrag::prompts::TaskTable;
use chainrag::retrieval::{rrf_merge, RankedList, Retriever, RRF_DEFAULT_DEPTH, RRF_DEFAULT_K};
use chainrag::sampler::QAInstance;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::jsonl::JsonlWriter;
use crate::run::{run_ordered, RunClock};
use crate::sample::Failure;
use crate::setup;

pub const DECODE_ERRORS_FILE: &str = "errors_decode.jsonl";

pub fn results_file_name(label: &str) -> String {
    format!("results_{label}.jsonl")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u64,
    pub generated: u64,
}

impl TokenCounts {
    pub fn total(&self) -> u64 {
        self.prompt + self.generated
    }
}

/// Trace event without its wall-clock duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub op: Operation,
    pub prompt_tokens: u64,
    pub generated_tokens: u64,
    pub retriever_calls: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl From<&TraceEvent> for EventRecord {
    fn from(e: &TraceEvent) -> Self {
        Self {
            op: e.op,
            prompt_tokens: e.prompt_tokens,
            generated_tokens: e.generated_tokens,
            retriever_calls: e.retriever_calls,
            depth: e.depth,
            note: e.note.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub id: String,
    pub dataset_id: String,
    pub label: String,
    pub query: String,
    pub prediction: String,
    pub golds: Vec<String>,
    pub em: u8,
    pub f1: f64,
    pub tokens: TokenCounts,
    pub recall_at_10: u8,
    pub recall_at_20: u8,
    pub recall_at_100: u8,
    pub doc_ids_fused: Vec<String>,
    pub chain: ChainRecord,
    pub candidate_penalties: Vec<Option<f64>>,
    pub events: Vec<EventRecord>,
}

/// RRF over every retrieval the chain made, including the final one.
pub fn fused_retrieval(chain: &RetrievalChain) -> RankedList {
    let lists: Vec<RankedList> = chain
        .steps()
        .iter()
        .map(|s| s.retrieved.clone())
        .chain(chain.final_retrieval().cloned())
        .collect();
    if lists.is_empty() {
        return RankedList::empty();
    }
    rrf_merge(&lists, RRF_DEFAULT_K, RRF_DEFAULT_DEPTH).unwrap_or_else(|_| RankedList::empty())
}

fn decode_one(
    qa: &QAInstance,
    config: &DecodeConfig,
    root_seed: u64,
    tasks: &TaskTable,
    backends: &Backends<'_>,
) -> Result<ResultLine, Failure> {
    let task = tasks.resolve(&qa.dataset_id).map_err(|e| Failure {
        stage: "task",
        message: e.to_string(),
        capability: false,
    })?;
    let id = qa.id();
    let config = DecodeConfig {
        seed: setup::instance_seed(root_seed, &id),
        ..config.clone()
    };
    // Candidates already run in parallel across instances; keep each instance sequential.
    let outcome = decode(
        &qa.query,
        &task,
        &config,
        backends,
        chainrag::ExecMode::Sequential,
    )
    .map_err(|e| Failure {
        stage: "decode",
        capability: e.is_capability(),
        message: e.to_string(),
    })?;
    let totals = outcome.trace.totals();
    let prediction = outcome.chain.final_answer().unwrap_or_default().to_string();
    let fused = fused_retrieval(&outcome.chain);
    let recall = |k| recall_at_k(&fused, &qa.answers, backends.retriever, k);
    Ok(ResultLine {
        id,
        dataset_id: qa.dataset_id.clone(),
        label: config.label(),
        query: qa.query.clone(),
        em: exact_match(&prediction, &qa.answers),
        f1: f1(&prediction, &qa.answers),
        golds: qa.answers.clone(),
        prediction,
        tokens: TokenCounts {
            prompt: totals.prompt_tokens,
            generated: totals.generated_tokens,
        },
        recall_at_10: recall(10),
        recall_at_20: recall(20),
        recall_at_100: recall(100),
        doc_ids_fused: fused.doc_ids().map(str::to_string).collect(),
        chain: outcome.chain.to_record(&totals),
        candidate_penalties: outcome.all_candidates.iter().map(|c| c.penalty).collect(),
        events: outcome
            .trace
            .events()
            .iter()
            .map(EventRecord::from)
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeSummary {
    pub label: String,
    pub path: PathBuf,
    pub decoded: usize,
    pub skipped: usize,
    pub errors: usize,
    pub em: f64,
    pub avg_tokens: f64,
}

fn run_config(
    config: &RunConfig,
    decode_config: &DecodeConfig,
    dataset: &[QAInstance],
    tasks: &TaskTable,
    backends: &Backends<'_>,
    err_w: &mut JsonlWriter,
) -> Result<DecodeSummary> {
    let label = decode_config.label();
    let path = config.output_dir.join(results_file_name(&label));
    let (mut w, existing) = JsonlWriter::open::<ResultLine>(&path, config.resume)?;
    let done: HashSet<&str> = existing.iter().map(|l| l.id.as_str()).collect();
    let pending: Vec<&QAInstance> = dataset
        .iter()
        .filter(|qa| !done.contains(qa.id().as_str()))
        .collect();
    let mut em_sum: f64 = existing.iter().map(|l| f64::from(l.em)).sum();
    let mut tok_sum: f64 = existing.iter().map(|l| l.tokens.total() as f64).sum();
    let mut summary = DecodeSummary {
        label: label.clone(),
        path: path.clone(),
        decoded: 0,
        skipped: dataset.len() - pending.len(),
        errors: 0,
        em: 0.0,
        avg_tokens: 0.0,
    };
    let mode = setup::exec_mode(config.workers);
    setup::with_pool(config.workers, || {
        run_ordered(
            &pending,
            mode,
            config.workers,
            |qa| decode_one(qa, decode_config, config.seed, tasks, backends),
            |qa, result| match result {
                Ok(line) => {
                    em_sum += f64::from(line.em);
                    tok_sum += line.tokens.total() as f64;
                    w.write(&line)?;
                    summary.decoded += 1;
                    Ok(())
                }
                Err(f) if f.capability => bail!(
                    "backend capability missing while decoding {:?}: {}",
                    qa.query,
                    f.message
                ),
                Err(f) => {
                    tracing::warn!(query = %qa.query, label = %label, "instance failed: {}", f.message);
                    err_w.write(&f.line(qa, &format!("{label}/")))?;
                    summary.errors += 1;
                    Ok(())
                }
            },
        )
    })??;
    let n = existing.len() + summary.decoded;
    if n > 0 {
        summary.em = 100.0 * em_sum / n as f64;
        summary.avg_tokens = tok_sum / n as f64;
    }
    Ok(summary)
}

/// Decodes the dataset once per configured strategy, one results file each.
pub fn cmd_decode(config: &RunConfig) -> Result<Vec<DecodeSummary>> {
    config.validate()?;
    let clock = RunClock::start("decode");
    std::fs::create_dir_all(&config.output_dir)?;
    let lm = setup::language_model(config)?;
    let retriever: Box<dyn Retriever> = setup::retriever(config)?;
    let templates = setup::templates(config)?;
    let tasks = setup::task_table(config)?;
    let dataset = setup::dataset(config)?;
    let backends = Backends::new(&lm, retriever.as_ref()).with_templates(&templates);
    let mut err_w = JsonlWriter::create(&config.output_dir.join(DECODE_ERRORS_FILE))?;
    let mut out = Vec::new();
    for d in config.decode_configs() {
        out.push(run_config(
            config, &d, &dataset, &tasks, &backends, &mut err_w,
        )?);
    }
    clock.finish(&config.output_dir, config.seed, config)?;
    Ok(out)
}

pub fn report(summaries: &[DecodeSummary]) -> String {
    summaries
        .iter()
        .map(|s| {
            format!(
                "{}: {} decoded, {} already done, {} errors, EM {:.1}, avg tokens {:.1} -> {}\n",
                s.label,
                s.decoded,
                s.skipped,
                s.errors,
                s.em,
                s.avg_tokens,
                s.path.display()
            )
        })
        .collect()
}

pub fn is_results_file(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("results_") && n.ends_with(".jsonl"))
}
