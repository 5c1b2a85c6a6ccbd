use anyhow::{Context, Result};
use chainrag::lm::{
    HttpBackend, HttpBackendConfig, LanguageModel, RuleSet, ScriptedBackend, Throttled,
};
use chainrag::prompts::{PromptTemplates, TaskTable};
use chainrag::retrieval::{
    load_corpus_jsonl, Bm25Index, Bm25Params, DocStore, HttpRetriever, Retriever,
};
use chainrag::sampler::QAInstance;
use chainrag::ExecMode;

use crate::config::{BackendKind, RunConfig};
use crate::jsonl::read_jsonl;

pub type Lm = Throttled<Box<dyn LanguageModel>>;

pub fn exec_mode(workers: usize) -> ExecMode {
    if workers == 1 {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

/// Runs `f` on a pool of `workers` threads (0 = all cores).
#[cfg(feature = "parallel")]
pub fn with_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")?;
    Ok(pool.install(f))
}

#[cfg(not(feature = "parallel"))]
pub fn with_pool<R: Send>(_workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    Ok(f())
}

pub fn language_model(config: &RunConfig) -> Result<Lm> {
    let b = &config.backend;
    let inner: Box<dyn LanguageModel> = match b.kind {
        BackendKind::Scripted => {
            let path = b
                .rules_path
                .as_ref()
                .context("the scripted backend needs a rules file")?;
            Box::new(ScriptedBackend::new(RuleSet::load(path)?))
        }
        BackendKind::Http => {
            let endpoint = b
                .endpoint
                .clone()
                .context("the http backend needs an endpoint")?;
            let http = HttpBackendConfig {
                api_key_env: Some(b.api_key_env.clone()),
                token_ids: b.token_ids.clone(),
                tokenize_endpoint: b.tokenize_endpoint,
                echo_logprobs: b.echo_logprobs,
                ..HttpBackendConfig::new(endpoint, b.model.clone())
            };
            Box::new(HttpBackend::new(http))
        }
    };
    Ok(Throttled::new(inner, b.max_in_flight))
}

pub fn build_index(config: &RunConfig) -> Result<Bm25Index> {
    let corpus = config
        .corpus_path
        .as_ref()
        .context("no corpus configured")?;
    let docs = load_corpus_jsonl(corpus)
        .with_context(|| format!("loading corpus {}", corpus.display()))?;
    Ok(Bm25Index::build_with(
        docs,
        Bm25Params::default(),
        exec_mode(config.workers),
    )?)
}

pub fn retriever(config: &RunConfig) -> Result<Box<dyn Retriever>> {
    if let Some(url) = &config.retriever_url {
        let corpus = config
            .corpus_path
            .as_ref()
            .context("no corpus configured")?;
        let store = DocStore::new(load_corpus_jsonl(corpus)?)?;
        let key = std::env::var(&config.backend.api_key_env).ok();
        return Ok(Box::new(
            HttpRetriever::new(url.clone(), store).with_api_key(key),
        ));
    }
    match &config.index_path {
        Some(path) if path.exists() => {
            Ok(Box::new(Bm25Index::load(path).with_context(|| {
                format!("loading index {}", path.display())
            })?))
        }
        _ => Ok(Box::new(build_index(config)?)),
    }
}

pub fn templates(config: &RunConfig) -> Result<PromptTemplates> {
    match &config.templates_dir {
        Some(dir) => PromptTemplates::load_dir(dir)
            .with_context(|| format!("loading templates from {}", dir.display())),
        None => Ok(PromptTemplates::builtin().clone()),
    }
}

pub fn task_table(config: &RunConfig) -> Result<TaskTable> {
    match &config.tasks_path {
        Some(path) => Ok(TaskTable::load(path)?),
        None => Ok(TaskTable::builtin()),
    }
}

pub fn dataset(config: &RunConfig) -> Result<Vec<QAInstance>> {
    let path = config
        .dataset_path
        .as_ref()
        .context("no dataset configured")?;
    read_jsonl(path)
}

/// Seed for one instance, independent of its position in the dataset.
pub fn instance_seed(root: u64, id: &str) -> u64 {
    chainrag::seeds::derive(root, &[chainrag::seeds::text_hash(id)])
}
