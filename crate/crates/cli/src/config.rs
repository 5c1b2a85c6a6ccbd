use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use chainrag::decoding::{DecodeConfig, Strategy};
use chainrag::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_API_KEY_ENV: &str = "CHAINRAG_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    #[default]
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Rule file for the scripted backend.
    pub rules_path: Option<PathBuf>,
    /// Completions endpoint base URL for the http backend.
    pub endpoint: Option<String>,
    pub model: String,
    pub api_key_env: String,
    pub token_ids: BTreeMap<String, Vec<u32>>,
    pub tokenize_endpoint: bool,
    pub echo_logprobs: bool,
    /// Upper bound on concurrent LM requests.
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            rules_path: None,
            endpoint: None,
            model: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            token_ids: BTreeMap::new(),
            tokenize_endpoint: false,
            echo_logprobs: true,
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_resamples: usize,
    pub ci_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_resamples: 1000,
            ci_level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus_path: Option<PathBuf>,
    pub index_path: Option<PathBuf>,
    pub dataset_path: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub tasks_path: Option<PathBuf>,
    /// Remote retriever; documents are still resolved from `corpus_path`.
    pub retriever_url: Option<String>,
    pub backend: BackendConfig,
    pub decode: DecodeConfig,
    /// Decode configurations to run; empty means just `decode`.
    pub sweep: Vec<DecodeConfig>,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Instances processed concurrently; 0 uses every core.
    pub workers: usize,
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_path: None,
            index_path: None,
            dataset_path: None,
            templates_dir: None,
            tasks_path: None,
            retriever_url: None,
            backend: BackendConfig::default(),
            decode: DecodeConfig::default(),
            sweep: Vec::new(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            workers: 0,
            resume: false,
        }
    }
}

/// Command-line overrides; every `Some` wins over the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigArgs {
    /// JSON run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub templates_dir: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub retriever_url: Option<String>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Scripted backend rule file
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Skip instances already present in the output files
    #[arg(long)]
    pub resume: bool,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub max_length: Option<usize>,
    #[arg(long)]
    pub n_chains: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub stop_bias: Option<f64>,
    /// Comma-separated decode labels, e.g. greedy_L6,best_of_n_L6_N4
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<String>,
    #[arg(long)]
    pub max_chains: Option<usize>,
    /// Inclusive chain-length range, e.g. 1-5
    #[arg(long, value_parser = parse_range)]
    pub length_range: Option<(usize, usize)>,
    #[arg(long)]
    pub subtask_sample_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StrategyArg {
    Greedy,
    BestOfN,
    TreeSearch,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Greedy => Strategy::Greedy,
            StrategyArg::BestOfN => Strategy::BestOfN,
            StrategyArg::TreeSearch => Strategy::TreeSearch,
        }
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once('-')
        .ok_or_else(|| format!("expected LO-HI, got {s:?}"))?;
    let lo = lo.trim().parse().map_err(|e| format!("{lo:?}: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
    Ok((lo, hi))
}

/// Inverse of [`DecodeConfig::label`]; unspecified knobs keep `base` values.
pub fn parse_decode_label(label: &str, base: &DecodeConfig) -> Result<DecodeConfig> {
    let (strategy, rest) = [
        ("greedy", Strategy::Greedy),
        ("best_of_n", Strategy::BestOfN),
        ("tree_search", Strategy::TreeSearch),
    ]
    .into_iter()
    .find_map(|(p, s)| label.strip_prefix(p).map(|r| (s, r)))
    .with_context(|| format!("unknown decode label {label:?}"))?;
    let mut config = DecodeConfig {
        strategy,
        ..base.clone()
    };
    for part in rest.split('_').filter(|p| !p.is_empty()) {
        let (key, value) = part.split_at(1);
        let value: usize = value
            .parse()
            .with_context(|| format!("bad value in decode label {label:?}: {part:?}"))?;
        match key {
            "L" => config.max_length = value,
            "N" => config.n_chains = value,
            "E" => config.expansion_size = value,
            "R" => config.n_rollouts = value,
            "D" => config.rollout_depth = value,
            _ => bail!("unknown key {key:?} in decode label {label:?}"),
        }
    }
    Ok(config)
}

fn rebase(dir: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = dir.join(&*path);
        }
    }
}

impl RunConfig {
    /// Relative paths inside the file are taken relative to the file itself.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.corpus_path,
            &mut config.index_path,
            &mut config.dataset_path,
            &mut config.templates_dir,
            &mut config.tasks_path,
            &mut config.backend.rules_path,
        ] {
            rebase(dir, p);
        }
        if config.output_dir.is_relative() {
            config.output_dir = dir.join(&config.output_dir);
        }
        Ok(config)
    }

    /// Flags > config file > built-in defaults.
    pub fn resolve(args: &ConfigArgs) -> Result<Self> {
        let mut c = match &args.config {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v.into();
                }
            };
        }
        set!(args.corpus => c.corpus_path);
        set!(args.index => c.index_path);
        set!(args.dataset => c.dataset_path);
        set!(args.templates_dir => c.templates_dir);
        set!(args.tasks => c.tasks_path);
        set!(args.retriever_url => c.retriever_url);
        set!(args.backend => c.backend.kind);
        set!(args.rules => c.backend.rules_path);
        set!(args.endpoint => c.backend.endpoint);
        set!(args.model => c.backend.model);
        set!(args.api_key_env => c.backend.api_key_env);
        set!(args.max_in_flight => c.backend.max_in_flight);
        set!(args.output_dir => c.output_dir);
        set!(args.seed => c.seed);
        set!(args.workers => c.workers);
        set!(args.strategy => c.decode.strategy);
        set!(args.max_length => c.decode.max_length);
        set!(args.n_chains => c.decode.n_chains);
        set!(args.stop_bias => c.decode.stop_bias);
        set!(args.max_chains => c.sampler.max_chains);
        set!(args.length_range => c.sampler.length_range);
        set!(args.subtask_sample_ratio => c.sampler.subtask_sample_ratio);
        if args.resume {
            c.resume = true;
        }
        if !args.sweep.is_empty() {
            c.sweep = args
                .sweep
                .iter()
                .map(|l| parse_decode_label(l.trim(), &c.decode))
                .collect::<Result<_>>()?;
        }
        // One root seed drives every stochastic component.
        c.decode.seed = c.seed;
        c.sampler.seed = c.seed;
        for d in &mut c.sweep {
            d.seed = c.seed;
        }
        Ok(c)
    }

    pub fn decode_configs(&self) -> Vec<DecodeConfig> {
        if self.sweep.is_empty() {
            vec![self.decode.clone()]
        } else {
            self.sweep.clone()
        }
    }

    fn check_exists(what: &str, p: &Option<PathBuf>) -> Result<()> {
        if let Some(path) = p {
            ensure!(path.exists(), "{what} {} does not exist", path.display());
        }
        Ok(())
    }

    /// Paths must exist and knobs must be in range before any work starts.
    pub fn validate(&self) -> Result<()> {
        Self::check_exists("corpus", &self.corpus_path)?;
        Self::check_exists("dataset", &self.dataset_path)?;
        Self::check_exists("templates dir", &self.templates_dir)?;
        Self::check_exists("task table", &self.tasks_path)?;
        Self::check_exists("rules file", &self.backend.rules_path)?;
        if self.retriever_url.is_none() {
            Self::check_exists("index", &self.index_path)?;
        }
        ensure!(
            self.corpus_path.is_some() || self.index_path.is_some(),
            "either a corpus or an index is required"
        );
        if self.retriever_url.is_some() {
            ensure!(
                self.corpus_path.is_some(),
                "a remote retriever needs the corpus to resolve documents"
            );
        }
        ensure!(self.dataset_path.is_some(), "a dataset is required");
        match self.backend.kind {
            BackendKind::Scripted => ensure!(
                self.backend.rules_path.is_some(),
                "the scripted backend needs a rules file"
            ),
            BackendKind::Http => {
                ensure!(
                    self.backend.endpoint.is_some(),
                    "the http backend needs an endpoint"
                );
                ensure!(
                    !self.backend.model.is_empty(),
                    "the http backend needs a model name"
                );
            }
        }
        self.sampler.validate().map_err(anyhow::Error::from)?;
        for d in self.decode_configs() {
            d.validate()
                .with_context(|| format!("decode config {}", d.label()))?;
        }
        ensure!(
            self.eval.ci_level > 0.0 && self.eval.ci_level < 1.0,
            "ci_level must be in (0, 1)"
        );
        Ok(())
    }
}
