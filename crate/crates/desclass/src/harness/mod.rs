//! Experiment orchestration: run configs, training loops for the four
//! strategies, evaluation, ablation grids, synthetic data, persistence.

mod ablate;
mod metrics;
mod synthetic;
mod train;

pub use ablate::{run_ablation, AblationAxis, AblationReport};
pub use metrics::{brute_force_metrics, epochs_to_near_final, score_predictions, Metrics};
pub use synthetic::{
    aspect_correlation, gen_synthetic, oracle_label, AspectDataset, RegistryFiles, SyntheticData,
    SyntheticError, SyntheticSpec,
};
pub use train::{
    dump_descriptions, evaluate, load_run, predictions, train, EpochRecord, ModelBundle,
    TrainOutcome,
};

use std::path::PathBuf;

use crate::encoder::Formulation;
use crate::extractive::InitMode;
use crate::templates::TemplateVariant;
use crate::tensor::AdamConfig;
use crate::text::TaskKind;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} (loss became non-finite); last good checkpoint retained")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Text(#[from] crate::text::TextError),
    #[error(transparent)]
    Template(#[from] crate::templates::TemplateError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    Template,
    Extractive,
    Abstractive,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DataPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    pub labels: PathBuf,
    /// Registry file for the wiki variant; unused by `label_index` and
    /// the baseline.
    #[serde(default)]
    pub registry: Option<PathBuf>,
    /// Keyword registry (falls back to `registry` when absent).
    #[serde(default)]
    pub registry_keyword: Option<PathBuf>,
    /// Synonym-array registry for the keyword-expansion variant.
    #[serde(default)]
    pub registry_expansion: Option<PathBuf>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EncoderSizes {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for EncoderSizes {
    fn default() -> Self {
        EncoderSizes { layers: 2, heads: 4, d_model: 128, d_ff: 256, max_len: 256, dropout: 0.0 }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { min_freq: 1, max_size: 50_000 }
    }
}

fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    32
}
fn default_b_samples() -> usize {
    4
}
fn default_fraction() -> f64 {
    1.0
}
fn default_l_max() -> usize {
    20
}
fn default_desc_max_len() -> usize {
    24
}
fn default_pretrain_epochs() -> usize {
    1
}

/// Full experiment description; mirrors the JSON config file
/// field-for-field.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub formulation: Formulation,
    #[serde(default = "default_variant")]
    pub template_variant: TemplateVariant,
    #[serde(default = "default_init_mode")]
    pub init_mode: InitMode,
    #[serde(default)]
    pub encoder: EncoderSizes,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Sampled description sets per example per REINFORCE step.
    #[serde(default = "default_b_samples")]
    pub b_samples: usize,
    pub seed: u64,
    /// Maximum extractive span length in tokens.
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    /// Maximum generated description length in tokens.
    #[serde(default = "default_desc_max_len")]
    pub desc_max_len: usize,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    pub data: DataPaths,
    #[serde(default = "default_fraction")]
    pub data_fraction: f64,
    #[serde(default)]
    pub eval_buckets: Option<Vec<usize>>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub vocab: VocabConfig,
}

fn default_variant() -> TemplateVariant {
    TemplateVariant::WikiFile
}

fn default_init_mode() -> InitMode {
    InitMode::Dummy
}

impl RunConfig {
    pub fn validate(&self, task_kind: TaskKind) -> Result<(), HarnessError> {
        if self.formulation == Formulation::NClass && task_kind == TaskKind::MultiLabel {
            return Err(HarnessError::Config(
                "the one-N-class formulation cannot handle multi-label tasks".into(),
            ));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(HarnessError::Config(format!(
                "data_fraction {} outside (0, 1]",
                self.data_fraction
            )));
        }
        if self.epochs == 0 {
            return Err(HarnessError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        if self.strategy == Strategy::Extractive && self.b_samples == 0 {
            return Err(HarnessError::Config("b_samples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), HarnessError> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}
