//! Experiment configuration: TOML or JSON, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::{AttackConfig, AugmentConfig, Bounds};
use crate::error::{Error, Result};
use crate::harness::data::{make_synthetic, Dataset, SyntheticKind};
use crate::harness::idx::load_mnist_dir;
use crate::losses::{LossConfig, LossKind};
use crate::mining::MiningConfig;
use crate::model::{Architecture, LayerSpec, OptimizerConfig};
use crate::tensor::Precision;
use crate::trainer::{BulletTrainConfig, ComputeBudget, Separation, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Baseline,
    #[default]
    Bullettrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        n: usize,
        test_n: usize,
        noise: f64,
    },
    Rings {
        n: usize,
        test_n: usize,
        noise: f64,
    },
    Mnist {
        /// Directory holding the four official IDX files.
        dir: PathBuf,
        /// Training subset size (first `n` samples); all when absent.
        #[serde(default)]
        n: Option<usize>,
        #[serde(default)]
        test_n: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Dense ReLU network with the given hidden widths.
    Mlp { hidden: Vec<usize> },
    SmallConvnet,
    Layers { layers: Vec<LayerSpec> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub n_o: usize,
    pub n_r: usize,
    pub n_b: usize,
    /// Permit budgets that break `N_O ≤ N_R ≤ N_B`.
    #[serde(default)]
    pub unordered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningSpec {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub separation: Separation,
}

fn default_momentum() -> f64 {
    MiningConfig::default().momentum
}

fn default_gamma() -> f64 {
    MiningConfig::default().gamma
}

impl Default for MiningSpec {
    fn default() -> Self {
        Self {
            momentum: default_momentum(),
            gamma: default_gamma(),
            separation: Separation::Mining,
        }
    }
}

/// Robust-accuracy evaluation run after each `every`-th epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub steps: usize,
    pub restarts: usize,
    /// Defaults to the training radius.
    pub epsilon: Option<f64>,
    /// Defaults to `2.5ε/steps`.
    pub step_size: Option<f64>,
    pub every: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            steps: 20,
            restarts: 1,
            epsilon: None,
            step_size: None,
            every: 1,
        }
    }
}

/// Attack parameters; input bounds come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    #[serde(default = "default_random_init")]
    pub random_init: bool,
}

fn default_random_init() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub chain_length: usize,
    pub noise_sigma: f64,
    pub translate_px: usize,
    pub cutout_size: usize,
    #[serde(default = "default_mix")]
    pub mix: bool,
}

fn default_mix() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub precision: Precision,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub epsilon_warmup_epochs: usize,
    /// Seed of the model initialisation; the run seed when absent.
    #[serde(default)]
    pub init_seed: Option<u64>,
    /// Fill the `wall_ms` column. Off by default so reruns give identical CSVs.
    #[serde(default)]
    pub record_wall_time: bool,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub attack: AttackSpec,
    #[serde(default)]
    pub augment: Option<AugmentSpec>,
    #[serde(default)]
    pub budget: Option<BudgetSpec>,
    #[serde(default)]
    pub mining: MiningSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// JSON when the text starts with `{`, TOML otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Self::from_json(text)
        } else {
            Self::from_toml(text)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overrides one dotted key, e.g. `mining.gamma=0.7` or `epochs=3`.
    /// The value is read as TOML (numbers, booleans, arrays) or else as a string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a table field")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return cfg_err("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return cfg_err("batch_size must be >= 1".into());
        }
        match &self.dataset {
            DatasetSpec::Blobs { n, test_n, noise } | DatasetSpec::Rings { n, test_n, noise } => {
                if *n < 2 || *test_n < 2 || !(*noise >= 0.0) {
                    return cfg_err("synthetic data needs n, test_n >= 2 and noise >= 0".into());
                }
            }
            DatasetSpec::Mnist { .. } => {}
        }
        if self.mode == RunMode::Bullettrain && self.budget.is_none() {
            return cfg_err("bullettrain mode needs a [budget] section".into());
        }
        if self.loss.kind == LossKind::Jsd && self.augment.is_none() {
            return cfg_err("the JSD loss needs an [augment] section".into());
        }
        if self.eval.steps == 0 || self.eval.restarts == 0 || self.eval.every == 0 {
            return cfg_err("eval steps, restarts and every must be >= 1".into());
        }
        self.train_config(Bounds::default())
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(b) = self.bullettrain_config(Bounds::default()) {
            let checked = if b.allow_unordered {
                Ok(())
            } else {
                b.budget.validate()
            };
            checked
                .and_then(|_| b.mining.validate())
                .map_err(|e| Error::Config(e.to_string()))?;
            if let Separation::Oracle { steps: 0 } = b.separation {
                return cfg_err("oracle separation needs steps >= 1".into());
            }
        }
        Ok(())
    }

    pub fn attack_config(&self, bounds: Bounds) -> AttackConfig {
        AttackConfig {
            epsilon: self.attack.epsilon,
            step_size: self.attack.step_size,
            steps: self.attack.steps,
            random_init: self.attack.random_init,
            bounds,
        }
    }

    pub fn train_config(&self, bounds: Bounds) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: self.optimizer,
            loss: self.loss,
            attack: self.attack_config(bounds),
            shuffle: true,
            epsilon_warmup_epochs: self.epsilon_warmup_epochs,
        }
    }

    pub fn bullettrain_config(&self, bounds: Bounds) -> Option<BulletTrainConfig> {
        if self.mode != RunMode::Bullettrain {
            return None;
        }
        let b = self.budget?;
        let attack = self.attack_config(bounds);
        Some(BulletTrainConfig {
            budget: ComputeBudget::unordered(b.n_o, b.n_r, b.n_b, &attack),
            mining: MiningConfig {
                momentum: self.mining.momentum,
                gamma: self.mining.gamma,
            },
            separation: self.mining.separation,
            allow_unordered: b.unordered,
        })
    }

    pub fn augment_config(&self, data: &Dataset) -> Option<AugmentConfig> {
        let a = self.augment?;
        Some(AugmentConfig {
            image: data.image.unwrap_or([1, 1, data.inputs.row_len()]),
            chain_length: a.chain_length,
            noise_sigma: a.noise_sigma,
            translate_px: a.translate_px,
            cutout_size: a.cutout_size,
            mix: a.mix,
            bounds: data.bounds,
        })
    }

    /// Training and test sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSpec::Blobs { n, test_n, noise } => Ok((
                make_synthetic(SyntheticKind::Blobs, *n, *noise, self.seed)?.with_split("train"),
                make_synthetic(SyntheticKind::Blobs, *test_n, *noise, self.seed ^ TEST_SEED_TAG)?.with_split("test"),
            )),
            DatasetSpec::Rings { n, test_n, noise } => Ok((
                make_synthetic(SyntheticKind::Rings, *n, *noise, self.seed)?.with_split("train"),
                make_synthetic(SyntheticKind::Rings, *test_n, *noise, self.seed ^ TEST_SEED_TAG)?.with_split("test"),
            )),
            DatasetSpec::Mnist { dir, n, test_n } => {
                let mut train = load_mnist_dir(dir, true)?;
                let mut test = load_mnist_dir(dir, false)?;
                if let Some(n) = n {
                    train = train.take(*n);
                }
                if let Some(n) = test_n {
                    test = test.take(*n);
                }
                Ok((train, test))
            }
        }
    }

    pub fn architecture(&self, data: &Dataset) -> Architecture {
        let d = data.inputs.row_len();
        let k = data.num_classes;
        match &self.model {
            ModelSpec::Mlp { hidden } => {
                let mut widths = vec![d];
                widths.extend_from_slice(hidden);
                widths.push(k);
                Architecture::mlp(&widths)
            }
            ModelSpec::SmallConvnet => {
                let [c, h, w] = data.image.unwrap_or([1, 1, d]);
                Architecture::small_convnet(c, h, w, k)
            }
            ModelSpec::Layers { layers } => Architecture {
                input: data.image.map(|i| i.to_vec()).unwrap_or_else(|| vec![d]),
                layers: layers.clone(),
            },
        }
    }
}

/// Keeps the synthetic test draw apart from the training draw.
const TEST_SEED_TAG: u64 = 0x7e57_7e57;
