//! The declarative run configuration (TOML).
//!
//! ```toml
//! seed = 7
//! data_dir = "runs/demo"
//!
//! [data]
//! n_per_class = 500
//! [data.source]
//! kind = "patch_dir"
//! root = "/data/IDC_regular_ps50_idx5"
//!
//! [train]
//! epochs = 30
//! ```
//!
//! The top-level `seed` is the master seed: it overrides the augmentation,
//! split, training and experiment seeds.

use std::path::{Path, PathBuf};

use idc_core::data::{AugmentConfig, DataSource, PadMode, PipelineConfig, SplitOrder};
use idc_core::model::{ModelConfig, TrainingConfig};
use idc_hitl::{ProtocolConfig, ServiceConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub n_per_class: usize,
    pub train_ratio: f64,
    pub order: SplitOrder,
    pub augment: AugmentConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = PipelineConfig::new(DataSource::PatchDir {
            root: PathBuf::from("data/IDC_regular_ps50_idx5"),
            strict: false,
            pad: PadMode::Reject,
        });
        Self {
            source: p.source,
            n_per_class: p.n_per_class,
            train_ratio: p.train_ratio,
            order: p.order,
            augment: p.augment,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub groups: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    /// Retraining schedule per group; the main `[train]` section when absent.
    pub train: Option<TrainingConfig>,
    pub warm_start: bool,
    pub duplication: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            groups: p.groups,
            n_fp: p.n_fp,
            n_fn: p.n_fn,
            train: None,
            warm_start: p.warm_start,
            duplication: p.duplication,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub host: String,
    pub port: u16,
    /// Built review UI assets; the API alone is served when absent.
    pub ui_dir: Option<PathBuf>,
    pub min_corrections: usize,
    /// Retraining schedule; the main `[train]` section when absent.
    pub retrain: Option<TrainingConfig>,
    pub warm_start: bool,
    pub duplication: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            ui_dir: None,
            min_corrections: 1,
            retrain: None,
            warm_start: true,
            duplication: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory for every artifact of the run.
    pub data_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainingConfig,
    pub experiment: ExperimentSection,
    pub service: ServiceSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("idc-run"),
            data: DataSection::default(),
            model: ModelConfig::default(),
            train: TrainingConfig::default(),
            experiment: ExperimentSection::default(),
            service: ServiceSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            source: self.data.source.clone(),
            n_per_class: self.data.n_per_class,
            augment: AugmentConfig {
                seed: self.seed,
                ..self.data.augment.clone()
            },
            train_ratio: self.data.train_ratio,
            order: self.data.order,
            seed: self.seed,
        }
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        let e = &self.experiment;
        ProtocolConfig {
            groups: e.groups,
            n_fp: e.n_fp,
            n_fn: e.n_fn,
            seed: self.seed,
            training: e.train.clone().unwrap_or_else(|| self.train.clone()),
            warm_start: e.warm_start,
            duplication: e.duplication,
        }
    }

    pub fn service(&self) -> ServiceConfig {
        let s = &self.service;
        ServiceConfig {
            data_dir: self.data_dir.join("service"),
            min_corrections: s.min_corrections,
            retrain: s.retrain.clone().unwrap_or_else(|| self.training()),
            warm_start: s.warm_start,
            duplication: s.duplication,
        }
    }

    /// Checks the settings every command relies on.
    pub fn validate(&self) -> Result<(), CliError> {
        let input = |e: String| CliError::Input(e);
        self.model.validate().map_err(|e| input(e.to_string()))?;
        self.train.validate().map_err(|e| input(e.to_string()))?;
        if let Some(t) = &self.experiment.train {
            t.validate().map_err(|e| input(format!("experiment.train: {e}")))?;
        }
        if let Some(t) = &self.service.retrain {
            t.validate().map_err(|e| input(format!("service.retrain: {e}")))?;
        }
        self.data.augment.validate().map_err(|e| input(e.to_string()))?;
        if !(self.data.train_ratio > 0.0 && self.data.train_ratio < 1.0) {
            return Err(input(format!("data.train_ratio {} must be in (0, 1)", self.data.train_ratio)));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir.join("manifest.json")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.data_dir.join("model.idcm")
    }
}
