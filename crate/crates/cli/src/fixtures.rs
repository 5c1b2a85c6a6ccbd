//! Writes scripted scenarios to disk in the formats the commands read.

use std::path::{Path, PathBuf};

use anyhow::Result;
use chainrag::scenarios::Scenario;

use crate::config::{BackendConfig, BackendKind, RunConfig};

#[derive(Debug, Clone)]
pub struct ScenarioFiles {
    pub corpus: PathBuf,
    pub dataset: PathBuf,
    pub rules: PathBuf,
}

impl ScenarioFiles {
    pub fn write(dir: &Path, scenario: &Scenario) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let files = Self {
            corpus: dir.join("corpus.jsonl"),
            dataset: dir.join("dataset.jsonl"),
            rules: dir.join("rules.json"),
        };
        std::fs::write(&files.corpus, scenario.corpus_jsonl())?;
        std::fs::write(&files.dataset, scenario.dataset_jsonl())?;
        std::fs::write(&files.rules, scenario.rules_json())?;
        Ok(files)
    }

    /// A scripted-backend run configuration over these files.
    pub fn run_config(&self, output_dir: &Path) -> RunConfig {
        RunConfig {
            corpus_path: Some(self.corpus.clone()),
            dataset_path: Some(self.dataset.clone()),
            backend: BackendConfig {
                kind: BackendKind::Scripted,
                rules_path: Some(self.rules.clone()),
                ..BackendConfig::default()
            },
            output_dir: output_dir.to_path_buf(),
            ..RunConfig::default()
        }
    }
}
