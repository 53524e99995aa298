//! The declarative run configuration read by every CLI command.
//!
//! A config file is a single JSON object. Every field has a default and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{BleuConfig, SampleSizes};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_hid: usize,
    /// Reward MLP width; defaults to `d_hid`.
    pub d_mlp: Option<usize>,
    /// Dropout keep-probability of the reward MLP during r-steps.
    pub keep_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_emb: 32, d_hid: 32, d_mlp: None, keep_prob: 0.75 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Token file of training sequences.
    pub train: Option<PathBuf>,
    /// Token file of held-out sequences (references for BLEU).
    pub test: Option<PathBuf>,
    /// Vocabulary file; when absent the vocabulary size comes from the oracle settings.
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub v_content: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    /// Training sequences written by `oracle-gen`.
    pub train_samples: usize,
    /// Held-out sequences written by `oracle-gen`.
    pub test_samples: usize,
    pub seq_len: usize,
    /// Oracle checkpoint used by `train` (per-iteration NLL) and `eval-nll`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            v_content: 5000,
            d_emb: 32,
            d_hid: 32,
            train_samples: 10_000,
            test_samples: 1000,
            seq_len: 20,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub orders: Vec<usize>,
    pub bleu: BleuConfig,
    pub sample_sizes: SampleSizes,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { orders: vec![2, 3, 4, 5], bleu: BleuConfig::default(), sample_sizes: SampleSizes::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SampleFormat {
    /// Space-separated token ids.
    #[default]
    Ids,
    /// Surface tokens, decoded with `data.vocab`.
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Number of sequences drawn by `sample`, and by `eval-nll` / `eval-bleu`
    /// when they sample from a generator.
    pub n: usize,
    pub format: SampleFormat,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n: 1000, format: SampleFormat::Ids }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    /// Generator to start from (`train`) or to sample from (`sample`, evals).
    pub generator: Option<PathBuf>,
    /// Reward approximator to start from in `train`.
    pub reward: Option<PathBuf>,
    /// Pre-generated token file scored by `eval-nll` / `eval-bleu` instead of
    /// sampling from `generator`.
    pub samples: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of all randomness; copied into `train.seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    pub threads: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub sample: SampleConfig,
    pub init: CheckpointPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            oracle: OracleConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            sample: SampleConfig::default(),
            init: CheckpointPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.train.seed = c.seed;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn d_mlp(&self) -> usize {
        self.model.d_mlp.unwrap_or(self.model.d_hid)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.seed != self.seed {
            return Err(Error::Config("train.seed must equal seed".into()));
        }
        let m = &self.model;
        if m.d_emb == 0 || m.d_hid == 0 || self.d_mlp() == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if !(m.keep_prob > 0.0 && m.keep_prob <= 1.0) {
            return Err(Error::Config("model.keep_prob must be in (0, 1]".into()));
        }
        let o = &self.oracle;
        if o.v_content == 0 || o.d_emb == 0 || o.d_hid == 0 || o.seq_len == 0 {
            return Err(Error::Config("oracle sizes must be >= 1".into()));
        }
        if self.metrics.orders.is_empty() || self.metrics.orders.contains(&0) {
            return Err(Error::Config("metrics.orders must be non-empty and >= 1".into()));
        }
        if self.sample.n == 0 {
            return Err(Error::Config("sample.n must be >= 1".into()));
        }
        Ok(())
    }

    /// Pretty-printed effective configuration, newline-terminated.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
