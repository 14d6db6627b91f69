//! Run configuration: one TOML file that determines a run completely.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wxnet_core::data::DEFAULT_TARGET_CITIES;
use wxnet_core::explain::Fill;
use wxnet_core::training::TrainConfig;
use wxnet_core::{ModelConfig, Variant};

use crate::error::{CliError, Result};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "WXNET_DATA_DIR";

/// File looked up inside the data directory.
pub const DEFAULT_DATA_FILE: &str = "weather.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Root under which run directories are created.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub explain: ExplainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Long-form CSV (`date,city,<features...>`).
    pub path: Option<PathBuf>,
    /// Generate a sinusoidal cube instead of reading a file.
    pub synthetic: Option<SyntheticSection>,
    /// Restrict to these cities (in this order).
    pub cities: Option<Vec<String>>,
    pub features: Option<Vec<String>>,
    /// Fraction of days for train + validation.
    #[serde(default = "default_split")]
    pub split: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub days: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Generic `f0..`/`c0..` grid instead of the full schema.
    pub features: Option<usize>,
    pub cities: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default = "default_target")]
    pub target: String,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_lags")]
    pub lags: usize,
    #[serde(default = "default_target_cities")]
    pub target_cities: Vec<String>,
}

/// Overrides on top of the variant's full-size defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_variant")]
    pub variant: String,
    pub filters: Option<usize>,
    pub kernel: Option<[usize; 2]>,
    pub dense: Option<Vec<usize>>,
    pub key_dim: Option<usize>,
    pub ff_dim: Option<usize>,
    pub streams: Option<usize>,
    pub bn_momentum: Option<f64>,
    pub bn_epsilon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillChoice {
    Zero,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    #[serde(default = "default_fill")]
    pub fill: FillChoice,
    /// Use at most this many test windows (all when unset).
    pub samples: Option<usize>,
    /// Test window that anchors score maximization.
    #[serde(default)]
    pub scoremax_sample: usize,
    #[serde(default = "default_bounds")]
    pub bounds: [f64; 2],
    /// Seed for a random start inside the bounds.
    pub scoremax_random_init: Option<u64>,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn default_split() -> f64 {
    0.9
}
fn default_noise() -> f64 {
    0.1
}
fn default_target() -> String {
    "avg_temp".into()
}
fn default_horizon() -> usize {
    2
}
fn default_lags() -> usize {
    10
}
fn default_target_cities() -> Vec<String> {
    DEFAULT_TARGET_CITIES.iter().map(|s| s.to_string()).collect()
}
fn default_variant() -> String {
    Variant::Unistream.name().into()
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    10
}
fn default_fill() -> FillChoice {
    FillChoice::Zero
}
fn default_bounds() -> [f64; 2] {
    [0.0, 1.0]
}

macro_rules! defaults_from_empty_table {
    ($($t:ty),*) => {$(
        impl Default for $t {
            fn default() -> Self {
                toml::from_str("").expect("all fields have defaults")
            }
        }
    )*};
}
defaults_from_empty_table!(RunConfig, DataSection, TaskSection, ModelSection, TrainSection, ExplainSection);

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|source| CliError::ConfigFile {
            path: origin.to_path_buf(),
            source,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn variant(&self) -> Result<Variant> {
        self.model
            .variant
            .parse()
            .map_err(|e: wxnet_core::Error| CliError::usage(e.to_string()))
    }

    /// Full-size defaults for the variant with the overrides applied; grid
    /// sizes come from the data.
    pub fn model_config(&self, features: usize, cities: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::full(self.variant()?);
        cfg.lags = self.task.lags;
        cfg.features = features;
        cfg.cities = cities;
        cfg.targets = self.task.target_cities.len();
        if let Some(s) = m.streams {
            cfg.streams = s;
        }
        if cfg.variant.is_multistream() {
            if cfg.streams == 0 || cfg.lags % cfg.streams != 0 {
                return Err(CliError::usage(format!(
                    "{} lags cannot be split evenly into {} streams",
                    cfg.lags, cfg.streams
                )));
            }
            cfg.lags_per_stream = cfg.lags / cfg.streams;
        }
        if let Some(f) = m.filters {
            cfg.filters = f;
        }
        if let Some([kh, kw]) = m.kernel {
            cfg.kernel = (kh, kw);
        }
        if let Some(d) = &m.dense {
            cfg.dense = d.clone();
        }
        cfg.key_dim = m.key_dim.or(cfg.key_dim);
        cfg.ff_dim = m.ff_dim.or(cfg.ff_dim);
        if let Some(v) = m.bn_momentum {
            cfg.bn_momentum = v;
        }
        if let Some(v) = m.bn_epsilon {
            cfg.bn_epsilon = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fill(&self) -> Fill {
        match self.explain.fill {
            FillChoice::Zero => Fill::Constant(0.0),
            FillChoice::Mean => Fill::ColumnMean,
        }
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        self.variant()?;
        if self.task.horizon == 0 {
            return Err(CliError::usage("horizon must be at least 1 day"));
        }
        if self.task.lags == 0 {
            return Err(CliError::usage("lags must be at least 1"));
        }
        if self.task.target_cities.is_empty() {
            return Err(CliError::usage("at least one target city is required"));
        }
        if !(self.data.split > 0.0 && self.data.split < 1.0) {
            return Err(CliError::usage(format!("split must be in (0, 1), got {}", self.data.split)));
        }
        if self.data.path.is_some() && self.data.synthetic.is_some() {
            return Err(CliError::usage("data.path and data.synthetic are mutually exclusive"));
        }
        let [lo, hi] = self.explain.bounds;
        if !(lo <= hi) {
            return Err(CliError::usage(format!("invalid explain bounds [{lo}, {hi}]")));
        }
        self.train_config()?;
        Ok(())
    }

    /// Run directory name: `<variant>_<target>_h<horizon>_seed<seed>`.
    pub fn run_name(&self) -> String {
        format!(
            "{}_{}_h{}_seed{}",
            self.model.variant, self.task.target, self.task.horizon, self.seed
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.join(self.run_name())
    }

    /// Data file: the configured path, else `$WXNET_DATA_DIR/weather.csv`.
    pub fn resolve_data_path(&self) -> Option<PathBuf> {
        if self.data.synthetic.is_some() {
            return None;
        }
        self.data.path.clone().or_else(|| {
            std::env::var_os(DATA_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map(|d| PathBuf::from(d).join(DEFAULT_DATA_FILE))
        })
    }
}
