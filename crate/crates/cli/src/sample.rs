use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use anyhow::{bail, Result};
use chainrag::chain::{Backends, RunTrace};
use chainrag::prompts::TaskTable;
use chainrag::sampler::{
    augment, emit_training_instances, AugmentedRecord, QAInstance, SamplerConfig, ScoreCache,
    TrainingInstance,
};
use chainrag::seeds;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::jsonl::JsonlWriter;
use crate::run::{run_ordered, RunClock};
use crate::setup;

pub const AUGMENTED_FILE: &str = "augmented.jsonl";
pub const TRAINING_FILE: &str = "training.jsonl";
pub const SAMPLE_ERRORS_FILE: &str = "errors_sample.jsonl";

/// One augmented instance plus how many training lines it produced, so a
/// resumed run can cut `training.jsonl` back to a consistent length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleLine {
    #[serde(flatten)]
    pub record: AugmentedRecord,
    pub training_instances: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorLine {
    pub id: String,
    pub dataset_id: String,
    pub query: String,
    pub stage: String,
    pub error: String,
}

pub(crate) struct Failure {
    pub stage: &'static str,
    pub message: String,
    pub capability: bool,
}

impl Failure {
    pub(crate) fn line(&self, qa: &QAInstance, stage_prefix: &str) -> ErrorLine {
        ErrorLine {
            id: qa.id(),
            dataset_id: qa.dataset_id.clone(),
            query: qa.query.clone(),
            stage: format!("{stage_prefix}{}", self.stage),
            error: self.message.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DatasetCounts {
    pub instances: usize,
    pub accepted: usize,
}

impl DatasetCounts {
    pub fn acceptance_rate(&self) -> f64 {
        if self.instances == 0 {
            0.0
        } else {
            self.accepted as f64 / self.instances as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SampleSummary {
    pub per_dataset: BTreeMap<String, DatasetCounts>,
    pub sampled: usize,
    pub skipped: usize,
    pub training_instances: usize,
    pub errors: usize,
    pub augmented_path: PathBuf,
    pub training_path: PathBuf,
}

impl SampleSummary {
    pub fn report(&self) -> String {
        let mut out = format!(
            "sampled {} instances ({} already done, {} errors); {} training instances\n",
            self.sampled, self.skipped, self.errors, self.training_instances
        );
        for (ds, c) in &self.per_dataset {
            out += &format!(
                "  {ds}: {} instances, {} accepted, acceptance rate {:.3}\n",
                c.instances,
                c.accepted,
                c.acceptance_rate()
            );
        }
        out
    }

    fn count(&mut self, line: &SampleLine) {
        let c = self
            .per_dataset
            .entry(line.record.dataset_id.clone())
            .or_default();
        c.instances += 1;
        if line.record.termination.is_some_and(|t| t.is_success()) {
            c.accepted += 1;
        }
        self.training_instances += line.training_instances;
    }
}

fn sample_one(
    qa: &QAInstance,
    config: &RunConfig,
    tasks: &TaskTable,
    backends: &Backends<'_>,
) -> Result<(SampleLine, Vec<TrainingInstance>), Failure> {
    let task = tasks.resolve(&qa.dataset_id).map_err(|e| Failure {
        stage: "task",
        message: e.to_string(),
        capability: false,
    })?;
    let seed = setup::instance_seed(config.seed, &qa.id());
    let sampler = SamplerConfig {
        seed,
        ..config.sampler.clone()
    };
    let cache = ScoreCache::new();
    let mut trace = RunTrace::new();
    let fail = |stage| {
        move |e: chainrag::sampler::SampleError| Failure {
            stage,
            capability: e.is_capability(),
            message: e.to_string(),
        }
    };
    let (aug, n) =
        augment(qa, &task, &sampler, backends, &cache, &mut trace).map_err(fail("augment"))?;
    let training = emit_training_instances(
        &aug,
        sampler.subtask_sample_ratio,
        seeds::derive(seed, &[2]),
        backends,
        &cache,
        &mut trace,
    )
    .map_err(fail("emit"))?;
    let line = SampleLine {
        record: aug.to_record(&trace, n),
        training_instances: training.len(),
    };
    Ok((line, training))
}

/// Samples chains for every dataset instance not already in the output.
pub fn cmd_sample(config: &RunConfig) -> Result<SampleSummary> {
    config.validate()?;
    let clock = RunClock::start("sample");
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    let lm = setup::language_model(config)?;
    let retriever = setup::retriever(config)?;
    let templates = setup::templates(config)?;
    let tasks = setup::task_table(config)?;
    let dataset = setup::dataset(config)?;

    let mut summary = SampleSummary {
        augmented_path: out.join(AUGMENTED_FILE),
        training_path: out.join(TRAINING_FILE),
        ..SampleSummary::default()
    };
    let (mut aug_w, existing) =
        JsonlWriter::open::<SampleLine>(&summary.augmented_path, config.resume)?;
    let kept: usize = existing.iter().map(|l| l.training_instances).sum();
    let mut train_w = if config.resume {
        JsonlWriter::open_keeping_lines(&summary.training_path, kept)?
    } else {
        JsonlWriter::create(&summary.training_path)?
    };
    let mut err_w = JsonlWriter::create(&out.join(SAMPLE_ERRORS_FILE))?;

    let done: HashSet<String> = existing.iter().map(|l| l.record.id.clone()).collect();
    for line in &existing {
        summary.count(line);
    }
    let pending: Vec<&QAInstance> = dataset
        .iter()
        .filter(|qa| !done.contains(&qa.id()))
        .collect();
    summary.skipped = dataset.len() - pending.len();

    let backends = Backends::new(&lm, retriever.as_ref()).with_templates(&templates);
    let mode = setup::exec_mode(config.workers);
    setup::with_pool(config.workers, || {
        run_ordered(
            &pending,
            mode,
            config.workers,
            |qa| sample_one(qa, config, &tasks, &backends),
            |qa, result| match result {
                Ok((line, training)) => {
                    for t in &training {
                        train_w.write(t)?;
                    }
                    aug_w.write(&line)?;
                    summary.sampled += 1;
                    summary.count(&line);
                    Ok(())
                }
                Err(f) if f.capability => bail!(
                    "backend capability missing while sampling {:?}: {}",
                    qa.query,
                    f.message
                ),
                Err(f) => {
                    tracing::warn!(query = %qa.query, "instance failed: {}", f.message);
                    err_w.write(&f.line(qa, ""))?;
                    summary.errors += 1;
                    Ok(())
                }
            },
        )
    })??;
    clock.finish(out, config.seed, config)?;
    Ok(summary)
}
