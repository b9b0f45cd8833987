//! Model, teacher, training and run configuration.
//!
//! Configs are plain TOML: one `key = value` per line, grouped in `[model]`,
//! `[teacher]`, `[train]`, `[decode]`, `[data]` and `[paths]` tables. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_to_string, write_atomic};
use crate::synthetic::SyntheticSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    /// Encoder depth and decoder depth; the top decoder layer is the coverage layer.
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Coverage iterations during training.
    pub k_train: usize,
    /// Length offsets are classified over `[-radius, radius]`.
    pub length_radius: usize,
    pub dropout: f64,
    pub lambda_init: f64,
    /// false: the top decoder layer is a standard decoder layer (the NAT-Base ablation).
    pub use_tcir: bool,
    /// Residual connection and norm around the coverage layer's inter-attention.
    pub coverage_inter_residual: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_hidden: 256,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 0,
            max_len: 64,
            k_train: 5,
            length_radius: 20,
            dropout: 0.1,
            lambda_init: 1.0,
            use_tcir: true,
            coverage_inter_residual: true,
            init_scale: 0.08,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.k_train == 0 {
            return Err(Error::Config("k_train must be at least 1".into()));
        }
        if self.n_layers < 2 {
            return Err(Error::Config(format!(
                "n_layers must be at least 2 (got {}): the coverage layer replaces the top decoder layer",
                self.n_layers
            )));
        }
        if self.vocab_size <= crate::vocab::EOS {
            return Err(Error::Config(format!("vocab_size {} is too small", self.vocab_size)));
        }
        if self.max_len == 0 || self.d_hidden == 0 {
            return Err(Error::Config("max_len and d_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn length_buckets(&self) -> usize {
        2 * self.length_radius + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub beam: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub max_tokens: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            d_model: 64,
            d_hidden: 256,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 0,
            max_len: 64,
            dropout: 0.1,
            beam: 4,
            init_scale: 0.08,
            seed: 1,
            steps: 3000,
            peak_lr: 1e-3,
            warmup: 300,
            max_tokens: 1024,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.beam == 0 || self.vocab_size <= crate::vocab::EOS {
            return Err(Error::Config("teacher needs layers, a beam >= 1 and a vocabulary".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Padded-token budget per batch.
    pub max_tokens: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eval_interval: usize,
    /// Pretraining stops after this many evaluations without a dev-BLEU improvement.
    pub patience: usize,
    pub log_interval: usize,
    /// Train with all three losses from step 0 under the warmup schedule.
    pub joint_from_scratch: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Dev sentences used for checkpoint selection (0 = all).
    pub dev_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            max_tokens: 1024,
            peak_lr: 5e-4,
            warmup: 500,
            pretrain_steps: 4000,
            finetune_steps: 200,
            finetune_lr: 1e-5,
            alpha: 0.1,
            beta: 0.5,
            eval_interval: 200,
            patience: 10,
            log_interval: 50,
            joint_from_scratch: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dev_limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.eval_interval == 0 || self.max_tokens == 0 {
            return Err(Error::Config("eval_interval and max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub k_dec: usize,
    pub lpd_radius: usize,
    /// Rows per batch during evaluation decoding.
    pub batch_rows: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            k_dec: 5,
            lpd_radius: 4,
            batch_rows: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Prefix of `<prefix>.src` / `<prefix>.tgt` training files.
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub disable_tcir: bool,
    pub disable_sca: bool,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: SyntheticSpec,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }

    /// Model config with the ablation switches and the run seed applied.
    pub fn effective_model(&self, vocab_size: usize) -> ModelConfig {
        let mut m = self.model.clone();
        m.vocab_size = vocab_size;
        m.seed = self.seed;
        if self.disable_tcir {
            m.use_tcir = false;
        }
        m
    }

    pub fn effective_teacher(&self, vocab_size: usize) -> TeacherConfig {
        let mut t = self.teacher.clone();
        t.vocab_size = vocab_size;
        t.seed = self.seed;
        t
    }

    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        if self.disable_sca {
            t.beta = 0.0;
        }
        t
    }
}
