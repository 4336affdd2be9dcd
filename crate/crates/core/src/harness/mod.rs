//! Experiment plumbing behind the command-line tool: spec files, output
//! directories, and the individual commands.

mod commands;
mod schema;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use commands::{
    eval_checkpoint, eval_generalization, generalization_report, generate, load_agent, probe_attention,
    random_baseline, summarize_probe, train, BaselineRow, GenMode, GenRow, ProbeSummary, DEFAULT_TEST_LENGTHS,
    DEFAULT_WITHHELD_PAIRS,
};
pub use schema::{check_csv, check_dir, schema_for, ColumnType, CsvSchema, SCHEMAS};

use crate::agent::{AgentConfig, AgentError, Variant};
use crate::env::{EnvError, LevelConfig, SplitSpec};
use crate::relational::RelationalError;
use crate::tensor::TensorError;
use crate::trainer::{Mode, TrainError, TrainSetup, TrainerConfig};

pub const SPEC_FILE: &str = "spec.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Spec {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error(transparent)]
    SpecWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Relational(#[from] RelationalError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("{0} already exists and is not empty (use --force to overwrite)")]
    OutputExists(PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path} line {line}: {detail}")]
    Schema {
        path: PathBuf,
        line: u64,
        detail: String,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_owned(),
        source,
    }
}

/// A complete experiment description, read from a TOML file with `[env]`,
/// `[agent]`, `[trainer]` and `[split]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub env: LevelConfig,
    pub agent: AgentConfig,
    pub trainer: TrainerConfig,
    pub split: SplitSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "boxworld".into(),
            seeds: vec![0],
            output_dir: None,
            env: LevelConfig::default(),
            agent: AgentConfig::default(),
            trainer: TrainerConfig::default(),
            split: SplitSpec::None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|source| HarnessError::Spec {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Checks every section without running anything.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidArgument("spec lists no seeds".into()));
        }
        self.env.validate()?;
        self.agent.validate()?;
        self.trainer.validate()?;
        Ok(())
    }

    pub fn setup(&self, seed: u64) -> TrainSetup {
        TrainSetup {
            level: self.env.clone(),
            split: self.split.clone(),
            agent: self.agent.clone(),
            trainer: self.trainer.clone(),
            seed,
        }
    }

    /// Applies command-line overrides. `max_threads` caps the actor count.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        variant: Option<Variant>,
        mode: Option<Mode>,
        max_threads: Option<usize>,
    ) {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(v) = variant {
            self.agent.variant = v;
        }
        if let Some(m) = mode {
            self.trainer.mode = m;
        }
        if let Some(t) = max_threads {
            self.trainer.num_actors = self.trainer.num_actors.min(t.max(1));
        }
    }
}

/// SHA-256 over `"blob <len>\0" + bytes`, the object framing git uses.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Creates `dir` for a new run. An existing non-empty directory is an
/// error unless `force`, in which case it is cleared.
pub fn prepare_output(dir: &Path, force: bool) -> Result<(), HarnessError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty {
            if !force {
                return Err(HarnessError::OutputExists(dir.to_owned()));
            }
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub name: String,
    pub seed: Option<u64>,
    pub spec_hash: String,
    pub version: String,
}

/// Writes the spec copy and a manifest naming its hash.
pub fn write_manifest(
    dir: &Path,
    spec: &ExperimentSpec,
    command: &str,
    seed: Option<u64>,
) -> Result<Manifest, HarnessError> {
    let text = spec.to_toml()?;
    let spec_path = dir.join(SPEC_FILE);
    fs::write(&spec_path, &text).map_err(io_err(&spec_path))?;
    let manifest = Manifest {
        command: command.into(),
        name: spec.name.clone(),
        seed,
        spec_hash: content_hash(text.as_bytes()),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}
