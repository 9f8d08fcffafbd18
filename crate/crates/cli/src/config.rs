//! Experiment configuration files (TOML, unknown keys rejected).

use std::fs;
use std::path::{Path, PathBuf};

use glt_core::data::{cifar_shape, BlobSpec, CIFAR_CLASSES};
use glt_core::dictionary::{make_bottleneck, BasisKind, Dictionary};
use glt_core::nn::{Layer, Network, NetworkSpec, TrainConfig};
use glt_core::pruning::PruneSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable consulted when a CIFAR-10 config gives no path.
pub const DATA_DIR_ENV: &str = "GLT_DATA_DIR";

/// Largest per-layer rotation block unless the config says otherwise.
pub const DEFAULT_MAX_BLOCK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub dictionary: DictionaryConfig,
    pub schedule: PruneSchedule,
    pub training: TrainConfig,
    pub dataset: DatasetConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DictionaryConfig {
    Canonical,
    /// Independent random rotation per layer, cut into blocks of at most
    /// `max_block` elements.
    Random {
        seed: u64,
        #[serde(default = "default_max_block")]
        max_block: usize,
    },
    /// One dense random rotation of the whole parameter space.
    RandomGlobal { seed: u64 },
    Bottleneck { layer: usize, u: BasisKind },
}

fn default_max_block() -> usize {
    DEFAULT_MAX_BLOCK
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Cifar10 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
    Synthetic(BlobSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Subspace sizes `s`; each one is trained once per seed.
    pub s_grid: Vec<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigSyntax {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Checks cross-field consistency and returns the compiled network.
    pub fn validate(&self) -> Result<Network> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "list at least one seed"));
        }
        let net = Network::new(self.network.clone()).map_err(|e| Error::config("network", e.to_string()))?;
        self.schedule
            .validate()
            .map_err(|e| Error::config("schedule.tau", e.to_string()))?;
        self.training
            .validate()
            .map_err(|e| Error::config("training", e.to_string()))?;
        if self.training.epochs_per_round == 0 {
            return Err(Error::config("training.epochs_per_round", "must be at least 1"));
        }
        match &self.dictionary {
            DictionaryConfig::Canonical | DictionaryConfig::RandomGlobal { .. } => {}
            DictionaryConfig::Random { max_block, .. } => {
                if *max_block == 0 {
                    return Err(Error::config("dictionary.max_block", "must be positive"));
                }
            }
            DictionaryConfig::Bottleneck { layer, u } => {
                match self.network.layers.get(*layer) {
                    Some(Layer::Dense { .. }) | Some(Layer::Head { .. }) => {}
                    Some(other) => {
                        return Err(Error::config(
                            "dictionary.layer",
                            format!("layer {layer} is {other:?}, not a dense layer"),
                        ))
                    }
                    None => {
                        return Err(Error::config(
                            "dictionary.layer",
                            format!("network has {} layers, no layer {layer}", self.network.layers.len()),
                        ))
                    }
                }
                make_bottleneck(&net, *layer, *u).map_err(|e| Error::config("dictionary.u", e.to_string()))?;
            }
        }
        if self.schedule.grouped && !matches!(self.dictionary, DictionaryConfig::Bottleneck { .. }) {
            return Err(Error::config("schedule.grouped", "grouped pruning needs a bottleneck dictionary"));
        }
        let (shape, classes) = match &self.dataset {
            DatasetConfig::Cifar10 { .. } => {
                let dir = self.data_dir()?;
                if !dir.is_dir() {
                    return Err(Error::config("dataset.path", format!("{} is not a directory", dir.display())));
                }
                (cifar_shape(), CIFAR_CLASSES)
            }
            DatasetConfig::Synthetic(spec) => (spec.input_shape, spec.classes),
        };
        if shape != self.network.input_shape {
            return Err(Error::config(
                "network.input_shape",
                format!("dataset provides {shape:?}, network expects {:?}", self.network.input_shape),
            ));
        }
        if classes != self.network.classes {
            return Err(Error::config(
                "network.classes",
                format!("dataset has {classes} classes, network has {}", self.network.classes),
            ));
        }
        if let Some(b) = &self.baseline {
            let d = net.param_count();
            if let Some(&s) = b.s_grid.iter().find(|&&s| s == 0 || s > d) {
                return Err(Error::config("baseline.s_grid", format!("{s} is outside [1, {d}]")));
            }
        }
        Ok(net)
    }

    /// CIFAR-10 directory: the configured path, else `GLT_DATA_DIR`.
    pub fn data_dir(&self) -> Result<PathBuf> {
        match &self.dataset {
            DatasetConfig::Cifar10 { path: Some(p) } => Ok(p.clone()),
            DatasetConfig::Cifar10 { path: None } => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                Error::config("dataset", format!("no CIFAR-10 path given and {DATA_DIR_ENV} is not set"))
            }),
            DatasetConfig::Synthetic(_) => Err(Error::config("dataset", "synthetic datasets have no directory")),
        }
    }

    pub fn build_dictionary(&self, net: &Network) -> Result<Dictionary> {
        let d = net.param_count();
        Ok(match &self.dictionary {
            DictionaryConfig::Canonical => Dictionary::canonical(d),
            DictionaryConfig::Random { seed, max_block } => Dictionary::per_layer_random(net.layout(), *seed, *max_block)?,
            DictionaryConfig::RandomGlobal { seed } => Dictionary::global_random(d, *seed)?,
            DictionaryConfig::Bottleneck { layer, u } => make_bottleneck(net, *layer, *u)?,
        })
    }

    /// SHA-256 over the experiment definition. Seeds and the output root are
    /// excluded so that adding seeds reuses the same directory.
    pub fn hash(&self) -> String {
        let key = Self {
            output_dir: PathBuf::new(),
            seeds: Vec::new(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&key).expect("config serializes to JSON");
        hex::encode(Sha256::digest(&json))
    }
}

/// Starting points written by `gen-config`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Synthetic,
    CifarMlp,
    CifarCnn,
}

pub fn preset(p: Preset) -> ExperimentConfig {
    use glt_core::nn::{InputShape, Padding};
    let (network, dictionary, schedule, dataset, training) = match p {
        Preset::Synthetic => {
            let shape = InputShape::new(6, 6, 1);
            (
                NetworkSpec::mlp(shape, &[24], 10),
                DictionaryConfig::RandomGlobal { seed: 0 },
                PruneSchedule::new(0.8, 15),
                DatasetConfig::Synthetic(BlobSpec {
                    classes: 10,
                    per_class: 150,
                    input_shape: shape,
                    noise_dims: 9,
                    separation: 4.0,
                    seed: 0,
                }),
                TrainConfig {
                    batch_size: 32,
                    ..TrainConfig::new(10, 0)
                },
            )
        }
        Preset::CifarMlp => (
            NetworkSpec::mlp(cifar_shape(), &[300, 100], CIFAR_CLASSES),
            DictionaryConfig::Bottleneck {
                layer: 1,
                u: BasisKind::Dct,
            },
            PruneSchedule::new(0.8, 15).grouped(),
            DatasetConfig::Cifar10 { path: None },
            TrainConfig {
                learning_rate: 0.01,
                ..TrainConfig::new(20, 0)
            },
        ),
        Preset::CifarCnn => (
            NetworkSpec::cnn(cifar_shape(), &[16, 8, 4], Padding::Valid, false, CIFAR_CLASSES),
            DictionaryConfig::Random {
                seed: 0,
                max_block: DEFAULT_MAX_BLOCK,
            },
            PruneSchedule::new(0.8, 20),
            DatasetConfig::Cifar10 { path: None },
            TrainConfig {
                learning_rate: 0.01,
                ..TrainConfig::new(20, 0)
            },
        ),
    };
    ExperimentConfig {
        network,
        dictionary,
        schedule,
        training,
        dataset,
        output_dir: default_output_dir(),
        seeds: vec![0],
        baseline: None,
    }
}
