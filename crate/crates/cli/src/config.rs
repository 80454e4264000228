//! Experiment configuration: parsing, defaults, overrides and resolution.

use std::fs;
use std::path::{Path, PathBuf};

use nalab::attention::{ProjectionConfig, ProjectionKind, ProjectionScope};
use nalab::data::{DatasetSpec, Task};
use nalab::model::{Architecture, ModelConfig};
use nalab::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "NALAB_SEED";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const DATASET_FILE: &str = "dataset.json";

/// Default chunk length, in characters, for the masked-LM task.
pub const MLM_CHUNK_LEN: usize = 64;

/// Dataset section. Either generated in memory from these fields, read
/// from a `gen-data` directory (`dir`), or, for `char-mlm`, cut from a text
/// corpus (the shipped one unless `corpus` is set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub min_len: Option<usize>,
    /// Maximum source length, or the chunk length for `char-mlm`.
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default)]
    pub num_train: Option<usize>,
    #[serde(default)]
    pub num_val: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

fn default_task() -> Task {
    Task::Reversal
}

impl Default for DataConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl DataConfig {
    pub fn spec(&self) -> DatasetSpec {
        let d = DatasetSpec::default();
        let mlm = self.task == Task::CharMlm;
        DatasetSpec {
            task: self.task,
            vocab_size: self.vocab_size.unwrap_or(d.vocab_size),
            min_len: self.min_len.unwrap_or(if mlm { 2 } else { d.min_len }),
            max_len: self.max_len.unwrap_or(if mlm { MLM_CHUNK_LEN } else { d.max_len }),
            num_train: self.num_train.unwrap_or(d.num_train),
            num_val: self.num_val.unwrap_or(d.num_val),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    fn materialize(&mut self) {
        let s = self.spec();
        self.vocab_size = Some(s.vocab_size);
        self.min_len = Some(s.min_len);
        self.max_len = Some(s.max_len);
        self.num_train = Some(s.num_train);
        self.num_val = Some(s.num_val);
        self.seed = Some(s.seed);
    }
}

/// Model section: every [`ModelConfig`] field except the vocabulary size
/// (taken from the data) and the projections (the top-level section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub d_model: Option<usize>,
    #[serde(default)]
    pub num_layers: Option<usize>,
    #[serde(default)]
    pub num_heads: Option<usize>,
    #[serde(default)]
    pub d_ff: Option<usize>,
    #[serde(default)]
    pub dropout_p: Option<f64>,
    #[serde(default)]
    pub max_seq_len: Option<usize>,
    #[serde(default)]
    pub architecture: Option<Architecture>,
    #[serde(default)]
    pub positional_encoding: Option<bool>,
    #[serde(default)]
    pub tie_embeddings: Option<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl ModelSection {
    fn build(&self, vocab_size: usize, task: Task, projection: ProjectionConfig) -> ModelConfig {
        let arch = self.architecture.unwrap_or(match task {
            Task::CharMlm => Architecture::Encoder,
            Task::Reversal | Task::Copy => Architecture::EncoderDecoder,
        });
        let d = ModelConfig::new(vocab_size, arch);
        ModelConfig {
            vocab_size,
            d_model: self.d_model.unwrap_or(d.d_model),
            num_layers: self.num_layers.unwrap_or(d.num_layers),
            num_heads: self.num_heads.unwrap_or(d.num_heads),
            d_ff: self.d_ff.unwrap_or(d.d_ff),
            dropout_p: self.dropout_p.unwrap_or(d.dropout_p),
            max_seq_len: self.max_seq_len.unwrap_or(d.max_seq_len),
            architecture: arch,
            positional_encoding: self.positional_encoding.unwrap_or(d.positional_encoding),
            tie_embeddings: self.tie_embeddings.unwrap_or(d.tie_embeddings),
            projection,
        }
    }

    fn from_model(m: &ModelConfig) -> Self {
        Self {
            d_model: Some(m.d_model),
            num_layers: Some(m.num_layers),
            num_heads: Some(m.num_heads),
            d_ff: Some(m.d_ff),
            dropout_p: Some(m.dropout_p),
            max_seq_len: Some(m.max_seq_len),
            architecture: Some(m.architecture),
            positional_encoding: Some(m.positional_encoding),
            tie_embeddings: Some(m.tie_embeddings),
        }
    }
}

/// `"neural"`, `{"kind": "neural", "scope": "qkv"}` or explicit roles
/// `{"q": …, "k": …, "v": …}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProjectionSetting {
    Kind(ProjectionKind),
    Preset(PresetSpec),
    Roles(ProjectionConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSpec {
    pub kind: ProjectionKind,
    #[serde(default = "default_scope")]
    pub scope: ProjectionScope,
    #[serde(default)]
    pub expansion: Option<usize>,
}

fn default_scope() -> ProjectionScope {
    ProjectionScope::Kv
}

impl Default for ProjectionSetting {
    fn default() -> Self {
        Self::Kind(ProjectionKind::Standard)
    }
}

impl ProjectionSetting {
    pub fn resolve(&self) -> ProjectionConfig {
        match *self {
            Self::Kind(kind) => ProjectionConfig::preset(kind, default_scope()),
            Self::Preset(p) => {
                let mut c = ProjectionConfig::preset(p.kind, p.scope);
                if let Some(e) = p.expansion {
                    c.expansion = e;
                }
                c
            }
            Self::Roles(c) => c,
        }
    }

    /// The same roles and width with `kind` swapped in.
    pub fn with_kind(&self, kind: ProjectionKind) -> ProjectionConfig {
        let base = self.resolve();
        let scope = match self {
            Self::Kind(_) => default_scope(),
            Self::Preset(p) => p.scope,
            Self::Roles(c) if c.q != ProjectionKind::Standard => ProjectionScope::Qkv,
            Self::Roles(_) => ProjectionScope::Kv,
        };
        ProjectionConfig {
            expansion: base.expansion,
            bias: base.bias,
            ..ProjectionConfig::preset(kind, scope)
        }
    }
}

/// The experiment file as written by a user.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub projection: ProjectionSetting,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub projection: Option<ProjectionKind>,
    pub seed: Option<u64>,
    pub max_steps: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Flag > environment > file > default. The seed override applies to
    /// both the data and the training seed.
    pub fn apply(&mut self, o: &Overrides, env_seed: Option<u64>) {
        if let Some(seed) = o.seed.or(env_seed) {
            self.data.seed = Some(seed);
            self.train.seed = seed;
        }
        if let Some(kind) = o.projection {
            self.projection = ProjectionSetting::Roles(self.projection.with_kind(kind));
        }
        if let Some(n) = o.max_steps {
            self.train.max_steps = n;
            self.train.epochs = None;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = Some(dir.clone());
        }
    }

    /// Fill every default given the vocabulary size of the loaded data, and
    /// validate. The result echoes to a file that reproduces the run.
    pub fn resolve(&self, vocab_size: usize) -> Result<ResolvedConfig, CliError> {
        let mut data = self.data.clone();
        data.materialize();
        let projection = self.projection.resolve();
        let model = self.model.build(vocab_size, data.task, projection);
        model.validate()?;
        self.train.validate()?;
        let want = match data.task {
            Task::CharMlm => Architecture::Encoder,
            Task::Reversal | Task::Copy => Architecture::EncoderDecoder,
        };
        if model.architecture != want {
            return Err(CliError::config(format!(
                "task {} needs the {} architecture",
                data.task,
                want.name()
            )));
        }
        Ok(ResolvedConfig {
            data,
            model,
            train: self.train.clone(),
            output_dir: self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(projection.headline_kind().name())),
        })
    }
}

/// Every setting of a run, defaults materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl ResolvedConfig {
    /// The config file form: re-running it reproduces the run.
    pub fn to_experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            data: self.data.clone(),
            model: ModelSection::from_model(&self.model),
            train: self.train.clone(),
            projection: ProjectionSetting::Roles(self.model.projection),
            output_dir: Some(self.output_dir.clone()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_experiment()).expect("config serializes")
    }
}

/// Parse `NALAB_SEED` if set.
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::config(format!("{SEED_ENV}: {e}"))),
    }
}
