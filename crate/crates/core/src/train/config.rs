//! TOML run configuration, schema `diffgate-config/1`.
//!
//! ```toml
//! format = "diffgate-config/1"
//!
//! [model]
//! preset = "mlp"              # "mlp", "lenet5" or "custom"
//! sizes = [784, 300, 100, 10]
//! [model.gates]               # omit for an ungated network
//! utility = "sigmoid"
//! lambda = 1e-4
//!
//! [data]
//! source = "mnist"            # or "blobs"
//! dir = "../data/mnist"       # relative to this file
//!
//! [training]
//! epochs = 10
//! batch_size = 100
//!
//! [optimizer]
//! learning_rate = 0.0005
//!
//! [seeds]
//! init = 1
//! shuffle = 2
//! dropout = 3
//! ```
//!
//! `lenet5` takes `[[model.gates]]` four times (conv1 filters, conv2 filters,
//! flattened features, hidden dense units). `custom` takes `input_shape` and
//! `[[model.layers]]` tables with a `kind` key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use super::TrainError;
use crate::data::{self, Dataset};
use crate::gates::PartitionConfig;
use crate::model::{LayerSpec, ModelSpec};

pub const FORMAT: &str = "diffgate-config/1";

/// Epoch count of the full MNIST protocol.
pub const FULL_PROTOCOL_EPOCHS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        sizes: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gates: Option<PartitionConfig>,
    },
    Lenet5 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gates: Option<Vec<PartitionConfig>>,
    },
    Custom {
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
    },
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec, TrainError> {
        match self {
            Self::Mlp { sizes, gates } => {
                if sizes.len() < 2 {
                    return Err(TrainError::Config("mlp needs at least two sizes".into()));
                }
                Ok(ModelSpec::mlp(sizes, *gates))
            }
            Self::Lenet5 { gates } => {
                let gates = match gates {
                    None => None,
                    Some(g) => {
                        Some(<[PartitionConfig; 4]>::try_from(g.as_slice()).map_err(|_| {
                            TrainError::Config(format!(
                                "lenet5 takes 4 gate tables, got {}",
                                g.len()
                            ))
                        })?)
                    }
                };
                Ok(ModelSpec::lenet5(gates))
            }
            Self::Custom {
                input_shape,
                layers,
            } => Ok(ModelSpec {
                input_shape: input_shape.clone(),
                layers: layers.clone(),
            }),
        }
    }
}

fn default_mnist_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// IDX files; `$DIFFGATE_DATA_DIR` overrides `dir`.
    Mnist {
        #[serde(default = "default_mnist_dir")]
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    Blobs {
        n_train: usize,
        n_test: usize,
        classes: usize,
        dim: usize,
        seed: u64,
    },
}

impl DataConfig {
    /// Train and test sets. Relative MNIST paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset), TrainError> {
        match self {
            Self::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let dir = data::data_dir(&base.join(dir));
                let (train, test) = data::load_mnist_dir(&dir)?;
                let limit = |d: Dataset, n: &Option<usize>| match n {
                    Some(n) => d.take(*n),
                    None => d,
                };
                Ok((limit(train, train_limit), limit(test, test_limit)))
            }
            Self::Blobs {
                n_train,
                n_test,
                classes,
                dim,
                seed,
            } => {
                if *classes < 2 || *n_train < *classes || *n_test < 1 || *dim < 1 {
                    return Err(TrainError::Config(
                        "blobs need classes >= 2, n_train >= classes, n_test >= 1, dim >= 1".into(),
                    ));
                }
                Ok(data::synthetic_blobs_split(
                    *n_train, *n_test, *classes, *dim, *seed,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: data::DEFAULT_BATCH_SIZE,
        }
    }
}

/// Every random stream is seeded explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub format: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub seeds: Seeds,
    /// Directory relative paths are resolved against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl TrainConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, TrainError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.format != FORMAT {
            return Err(TrainError::Config(format!(
                "unsupported format {:?}, expected {FORMAT:?}",
                self.format
            )));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1)
            || !(0.0..1.0).contains(&self.optimizer.beta2)
        {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.optimizer.epsilon > 0.0) {
            return bad("adam epsilon must be positive");
        }
        if self.training.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.training.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        self.model.spec()?.shapes()?;
        Ok(())
    }

    /// The full MNIST protocol: 200 epochs over every available image.
    pub fn full_protocol(mut self) -> Self {
        self.training.epochs = FULL_PROTOCOL_EPOCHS;
        if let DataConfig::Mnist {
            train_limit,
            test_limit,
            ..
        } = &mut self.data
        {
            *train_limit = None;
            *test_limit = None;
        }
        self
    }
}
