//! Training and run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskPolicy;
use crate::model::VectorFieldModelConfig;
use crate::sampler::SamplerConfig;
use crate::tasks::{ENHANCE_DROP_PROB, MULTITASK_FACTORS, SynthCorpusConfig};

/// Version of the run-config file layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Finetune,
    Lora,
    Multitask,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(TrainMode::Pretrain),
            "finetune" => Ok(TrainMode::Finetune),
            "lora" => Ok(TrainMode::Lora),
            "multitask" => Ok(TrainMode::Multitask),
            other => Err(Error::config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    /// Target batch size as a sum of utterance durations.
    pub batch_seconds: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub mask_policy: MaskPolicy,
    /// Condition drop probability for task fine-tuning.
    pub drop_prob: f64,
    pub lora_rank: usize,
    /// Random crop applied to pre-training utterances longer than this.
    pub max_frames: Option<usize>,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// Per-task upsampling in multitask mode (enhance, separate, synth).
    pub multitask_factors: Vec<usize>,
    /// Symbol vocabulary to enable when fine-tuning on symbol-conditioned
    /// data; inferred from the data when unset.
    pub symbol_vocab_size: Option<usize>,
    pub sigma_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 20_000,
            warmup_steps: 1_000,
            peak_lr: 5e-4,
            final_lr: 1e-5,
            batch_seconds: 60.0,
            grad_clip: 1.0,
            seed: 0,
            mode: TrainMode::Pretrain,
            mask_policy: MaskPolicy::default(),
            drop_prob: ENHANCE_DROP_PROB,
            lora_rank: 16,
            max_frames: None,
            checkpoint_every: 1_000,
            multitask_factors: MULTITASK_FACTORS.to_vec(),
            symbol_vocab_size: None,
            sigma_min: 1e-5,
        }
    }
}

impl TrainConfig {
    /// Default fine-tuning schedule: a quarter of the pre-training budget.
    pub fn finetune_default() -> Self {
        TrainConfig {
            total_steps: 5_000,
            warmup_steps: 250,
            mode: TrainMode::Finetune,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be positive"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.final_lr >= 0.0 && self.peak_lr > self.final_lr && self.peak_lr.is_finite()) {
            return Err(Error::config(format!(
                "need peak_lr > final_lr ≥ 0, got {} and {}",
                self.peak_lr, self.final_lr
            )));
        }
        if !(self.batch_seconds > 0.0 && self.batch_seconds.is_finite()) {
            return Err(Error::config("batch_seconds must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::config(format!("drop_prob {} outside [0, 1]", self.drop_prob)));
        }
        if self.lora_rank == 0 {
            return Err(Error::config("lora_rank must be at least 1"));
        }
        if self.max_frames == Some(0) {
            return Err(Error::config("max_frames must be positive"));
        }
        if self.multitask_factors.is_empty() || self.multitask_factors.contains(&0) {
            return Err(Error::config("multitask factors must be positive"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::config(format!("sigma_min {} outside (0, 1)", self.sigma_min)));
        }
        self.mask_policy.validate()
    }
}

/// Learning rate after `step` optimiser updates: linear warm-up from 0 to
/// `peak_lr`, then linear decay to `final_lr` at `total_steps`; constant
/// afterwards.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.total_steps {
        return cfg.final_lr;
    }
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let frac = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.peak_lr + (cfg.final_lr - cfg.peak_lr) * frac
}

/// How task datasets are cut from the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Held-out utterances, generated from a separate seed.
    pub eval_utterances: usize,
    pub eval_seed: u64,
    /// Sources per separation mixture.
    pub n_sources: usize,
    /// Range of the relative source gain in separation mixtures.
    pub source_gain_db: f64,
    /// Seed for noise, SNR and pairing draws.
    pub task_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            eval_utterances: 40,
            eval_seed: 1_000,
            n_sources: 2,
            source_gain_db: 2.5,
            task_seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_utterances == 0 {
            return Err(Error::config("eval_utterances must be positive"));
        }
        if !(2..=3).contains(&self.n_sources) {
            return Err(Error::config(format!("n_sources {} outside 2..=3", self.n_sources)));
        }
        if !(self.source_gain_db >= 0.0 && self.source_gain_db.is_finite()) {
            return Err(Error::config("source_gain_db must be a finite non-negative value"));
        }
        Ok(())
    }
}

/// Everything one experiment needs, stored as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: VectorFieldModelConfig,
    /// Pre-training schedule.
    #[serde(default)]
    pub train: TrainConfig,
    /// Fine-tuning schedule.
    #[serde(default = "TrainConfig::finetune_default")]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub corpus: SynthCorpusConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            model: VectorFieldModelConfig::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig::finetune_default(),
            sampler: SamplerConfig::default(),
            corpus: SynthCorpusConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.sampler.validate()?;
        self.corpus.validate()?;
        self.data.validate()
    }

    /// Parse and validate. Any problem, including a syntax error, is a
    /// configuration error.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}
