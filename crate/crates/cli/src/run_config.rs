//! The serializable description of one run. A `--config` file holds the same
//! JSON that every command echoes into its output directory, so any run can
//! be replayed with `--config <out>/run_config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use strtr::data::Split;
use strtr::network::ModelConfig;
use strtr::train::TrainConfig;

pub const ECHO_FILE: &str = "run_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Two 8-channel trunk blocks, one transformer layer per stream.
    Tiny,
    /// Nine trunk blocks (64/128/256 channels), three transformer layers.
    Full,
}

impl Arch {
    pub fn config(self) -> ModelConfig {
        match self {
            Arch::Tiny => ModelConfig::tiny(),
            Arch::Full => ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenOptions {
    pub classes: usize,
    pub per_class: usize,
    pub joints: usize,
    pub frames: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 25,
            joints: 5,
            frames: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub splits: Vec<Split>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { splits: vec![Split::Test] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub batch: usize,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            batch: 2,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportOptions {
    /// Index into the dataset's sample list.
    pub sample: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Set on echo; ignored when loading.
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Explicit architecture. When absent, `arch` picks a base and the
    /// dataset fills in joints, channels and classes.
    pub model: Option<ModelConfig>,
    pub arch: Option<Arch>,
    pub preset: Option<String>,
    /// Explicit training settings; when absent, `preset` applies.
    pub train: Option<TrainConfig>,
    pub gen_data: GenOptions,
    pub eval: EvalOptions,
    pub gradcheck: GradcheckOptions,
    pub export: ExportOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn echo(&self, command: &str, dir: &Path) -> anyhow::Result<()> {
        let mut run = self.clone();
        run.command = Some(command.to_string());
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        fs::write(dir.join(ECHO_FILE), serde_json::to_string_pretty(&run)? + "\n")?;
        Ok(())
    }
}
