//! Run configuration (TOML, fail-closed on unknown keys) and the RNG policy
//! that derives independent per-purpose random streams from one master seed.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::downstream::{EncoderConfig, TaskKind};
use crate::error::{contract, CoreError, Result};
use crate::tokenizer::TokenizerConfig;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    /// Desk-scale epoch counts; raise for full-scale runs.
    pub tokenizer_epochs: usize,
    pub mtp_epochs: usize,
    pub finetune_epochs: usize,
    /// Warmup fraction of total optimization steps before cosine decay.
    pub warmup_frac: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Second-moment decay used during fine-tuning only.
    pub finetune_beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            tokenizer_epochs: 30,
            mtp_epochs: 20,
            finetune_epochs: 20,
            warmup_frac: 0.05,
            peak_lr: 5e-3,
            min_lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.99,
            finetune_beta2: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(contract("batch size must be positive"));
        }
        if !(self.peak_lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return Err(contract("need 0 < min_lr <= peak_lr"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(contract("warmup_frac must lie in [0,1)"));
        }
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("finetune_beta2", self.finetune_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(contract(format!("{name} must lie in [0,1)")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(contract("weight decay must be non-negative"));
        }
        Ok(())
    }
}

fn default_task() -> TaskKind {
    TaskKind::Multiclass { classes: 3 }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    #[serde(default = "default_task")]
    pub task: TaskKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tokenizer: TokenizerConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            task: default_task(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.encoder.vocab != self.tokenizer.codebook_size {
            return Err(contract(format!(
                "encoder vocab {} must match tokenizer codebook size {}",
                self.encoder.vocab, self.tokenizer.codebook_size
            )));
        }
        if self.encoder.width != self.tokenizer.width {
            return Err(contract(format!(
                "encoder width {} must match tokenizer width {} (token table is seeded from the codebook)",
                self.encoder.width, self.tokenizer.width
            )));
        }
        if let TaskKind::Multiclass { classes } = self.task {
            if classes < 2 {
                return Err(contract("multiclass task needs at least 2 classes"));
            }
        }
        Ok(())
    }
}

/// Named random streams. Every consumer of randomness draws from its own
/// stream so that, e.g., changing the masking schedule cannot perturb weight
/// initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RngPurpose {
    Init,
    Masking,
    Shuffling,
    Synthetic,
}

impl RngPurpose {
    fn stream_id(self) -> u64 {
        match self {
            RngPurpose::Init => 1,
            RngPurpose::Masking => 2,
            RngPurpose::Shuffling => 3,
            RngPurpose::Synthetic => 4,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RngPolicy {
    pub master: u64,
}

impl RngPolicy {
    pub fn new(master: u64) -> Self {
        RngPolicy { master }
    }

    pub fn stream(&self, purpose: RngPurpose) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(purpose.stream_id());
        rng
    }
}
