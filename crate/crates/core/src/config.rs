//! Experiment configuration files.
//!
//! A config is TOML with the sections `[data]`, `[model]`, `[prune]`,
//! `[retrain]`, `[optim]` and `[run]`. Every key is optional and unknown
//! keys are rejected. Values are validated before any computation starts.
//!
//! ```toml
//! [data]
//! interactions = "ratings.tsv"
//!
//! [model]
//! dim = 128
//! bucket_size = 420
//!
//! [prune]
//! target_sparsity = 0.95
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codebook::ThresholdScheme;
use crate::loss::LossConfig;
use crate::scorer::ScorerKind;
use crate::train::{Mode, RetrainMode, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Raw interaction log, one `user item` pair per line.
    pub interactions: Option<PathBuf>,
    /// Directory written by `prepare`.
    pub split_dir: Option<PathBuf>,
    pub train_fraction: f64,
    /// Share of the train+validation block held out for validation.
    pub validation_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            interactions: None,
            split_dir: None,
            train_fraction: 0.8,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub bucket_size: Option<usize>,
    pub scorer: ScorerKind,
    pub mlp_hidden: Option<Vec<usize>>,
    pub threshold_init: ThresholdScheme,
    pub threshold_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub target_sparsity: f64,
    pub gamma0: f64,
    pub gamma_decay: bool,
    pub eta: f64,
    /// Off is the same as `gamma0 = 0`.
    pub regularizer: bool,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainSection {
    pub epochs: usize,
    pub patience: usize,
    pub mode: RetrainMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub freeze_negatives: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub mode: Mode,
    pub topn: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub prune: PruneSection,
    pub retrain: RetrainSection,
    pub optim: OptimSection,
    pub run: RunSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ExperimentConfig::default().model
    }
}

impl Default for PruneSection {
    fn default() -> Self {
        ExperimentConfig::default().prune
    }
}

impl Default for RetrainSection {
    fn default() -> Self {
        ExperimentConfig::default().retrain
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        ExperimentConfig::default().optim
    }
}

impl Default for RunSection {
    fn default() -> Self {
        ExperimentConfig::default().run
    }
}

impl ExperimentConfig {
    fn from_train(t: &TrainConfig) -> Self {
        Self {
            data: DataSection::default(),
            model: ModelSection {
                dim: t.dim,
                bucket_size: (t.bucket_size > 0).then_some(t.bucket_size),
                scorer: t.scorer,
                mlp_hidden: t.mlp_hidden.clone(),
                threshold_init: t.threshold_init,
                threshold_offset: t.threshold_offset,
            },
            prune: PruneSection {
                target_sparsity: t.target_sparsity,
                gamma0: t.loss.gamma0,
                gamma_decay: t.loss.gamma_decay,
                eta: t.loss.eta,
                regularizer: true,
                max_epochs: t.max_prune_epochs,
            },
            retrain: RetrainSection {
                epochs: t.retrain_epochs,
                patience: t.patience,
                mode: t.retrain_mode,
            },
            optim: OptimSection {
                learning_rate: t.learning_rate,
                weight_decay: t.weight_decay,
                batch_size: t.batch_size,
                negatives: t.negatives,
                freeze_negatives: t.freeze_negatives,
            },
            run: RunSection {
                seed: t.seed,
                mode: t.mode,
                topn: t.topn,
                out: None,
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolves the training parameters. `num_entities` fills in the
    /// smallest valid bucket size when none is configured.
    pub fn train_config(&self, num_entities: Option<usize>) -> Result<TrainConfig> {
        let bucket_size = match (self.model.bucket_size, num_entities) {
            (Some(b), _) => b,
            (None, Some(n)) => crate::hashing::HashSpec::min_bucket_size(n),
            (None, None) => 0,
        };
        let cfg = TrainConfig {
            mode: self.run.mode,
            dim: self.model.dim,
            bucket_size,
            target_sparsity: self.prune.target_sparsity,
            loss: LossConfig {
                gamma0: if self.prune.regularizer { self.prune.gamma0 } else { 0.0 },
                eta: self.prune.eta,
                gamma_decay: self.prune.gamma_decay,
            },
            learning_rate: self.optim.learning_rate,
            weight_decay: self.optim.weight_decay,
            batch_size: self.optim.batch_size,
            negatives: self.optim.negatives,
            freeze_negatives: self.optim.freeze_negatives,
            max_prune_epochs: self.prune.max_epochs,
            retrain_epochs: self.retrain.epochs,
            patience: self.retrain.patience,
            seed: self.run.seed,
            threshold_init: self.model.threshold_init,
            threshold_offset: self.model.threshold_offset,
            retrain_mode: self.retrain.mode,
            scorer: self.model.scorer,
            mlp_hidden: self.model.mlp_hidden.clone(),
            topn: self.run.topn,
        };
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1]", self.data.train_fraction)));
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.data.validation_fraction
            )));
        }
        if bucket_size == 0 && cfg.mode == Mode::Cerp {
            // bucket size is derived once the dataset is known
            TrainConfig { bucket_size: 1, ..cfg.clone() }.validate()?;
        } else {
            cfg.validate()?;
        }
        Ok(cfg)
    }
}
