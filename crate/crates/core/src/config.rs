//! Run configuration: every module's settings in one TOML document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::GenerationSettings;
use crate::error::{Error, Result};
use crate::metrics::EvalSettings;
use crate::model::ModelConfig;
use crate::synth::{token_vocab, Mix, ShapeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub train_seed: u64,
    pub eval_count: usize,
    pub eval_seed: u64,
    pub shape: ShapeParams,
    pub mix: Mix,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_count: 4000,
            train_seed: 1,
            eval_count: 200,
            eval_seed: 999,
            shape: ShapeParams::default(),
            mix: Mix {
                raster: 0.4,
                two_column: 0.3,
                spiral: 0.3,
                table_rowwise: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            steps: 1000,
            peak_lr: 1e-3,
            floor_lr: 1e-5,
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch: usize,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch: 16,
            stage1: StageConfig {
                steps: 2000,
                ..StageConfig::default()
            },
            stage2: StageConfig::default(),
            stage3: StageConfig::default(),
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

impl TrainingConfig {
    pub fn stage(&self, stage: u8) -> Result<StageConfig> {
        match stage {
            1 => Ok(self.stage1),
            2 => Ok(self.stage2),
            3 => Ok(self.stage3),
            _ => Err(Error::InvalidArgument(format!("no stage {stage}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub repetition_guard: Option<usize>,
    pub min_gram: usize,
    pub min_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_new_tokens: 70,
            repetition_guard: None,
            min_gram: 5,
            min_repeats: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// TOML of everything that affects results; the output directory is left out.
    pub fn canonical_toml(&self) -> String {
        RunConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        }
        .to_toml()
    }

    /// SHA-256 of [`RunConfig::canonical_toml`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.shape.validate()?;
        self.data.mix.validate()?;
        self.model.validate()?;
        let d = &self.model.decoder;
        if d.vocab_size != token_vocab(self.data.shape.vocab) {
            return Err(Error::Config(format!(
                "decoder vocab_size {} must be {} for {} glyphs",
                d.vocab_size,
                token_vocab(self.data.shape.vocab),
                self.data.shape.vocab
            )));
        }
        if d.max_text_len < self.data.shape.max_target_len() {
            return Err(Error::Config(format!(
                "decoder max_text_len {} below the longest target {}",
                d.max_text_len,
                self.data.shape.max_target_len()
            )));
        }
        if self.training.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.eval.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn generation(&self) -> GenerationSettings {
        GenerationSettings {
            max_new_tokens: self.eval.max_new_tokens,
            repetition_guard: self.eval.repetition_guard,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        let d = &self.model.decoder;
        EvalSettings {
            pad: d.pad,
            bos: d.bos,
            eos: d.eos,
            min_gram: self.eval.min_gram,
            min_repeats: self.eval.min_repeats,
        }
    }
}
