//! Experiment configuration, read from TOML.
//!
//! Every table rejects unknown keys, and every key has a default, so an
//! empty file is a valid config. The grammar, with defaults:
//!
//! ```toml
//! seed = 7
//! fusion = "res-gated-bi-caf"   # dfc | res-uni-caf | res-bi-caf | res-gated-bi-caf
//!                               # | res-gated-bi-caf-dfc | whisper-only | mhubert-only
//! # Streams run by the `all` subcommand; defaults to every mechanism and both baselines.
//! # sweep = ["dfc", "whisper-only"]
//!
//! [projector]                   # or: kind = "qformer", window, queries_per_window, layers, heads
//! kind = "linear"
//! conv_layers = [{ kernel = 3, stride = 2 }]
//! mlp_hidden = 128
//!
//! [data]
//! train_utts = 600
//! valid_fraction = 0.05
//! langs = ["en", "fr", "de", "it", "pt", "es", "ru", "vi", "ja", "ko", "th"]
//! [data.generator]
//! symbols = 8
//! share_span = 4
//! # d_raw, noise, frames_per_token, trailing_silence, min_tokens, max_tokens,
//! # frame_seconds, task_seed
//!
//! [model]                       # d_whisper, d_mhubert, encoder_*, fusion_heads
//! [model.lm]                    # vocab, d_model, layers, heads, mlp_hidden, max_len, lora_*
//!
//! [pretrain.ctc]                # epochs, max_batch_seconds, [pretrain.ctc.adam]
//! [pretrain.lm]                 # steps, batch_size, noise, min_tokens, max_tokens, [pretrain.lm.adam]
//!
//! [[stages]]
//! name = "stage1"
//! trainable = ["projector", "fusion"]
//! epochs = 6
//! [stages.adam]
//! peak_lr = 0.002
//! warmup_steps = 20
//!
//! [[stages]]
//! name = "stage2"
//! trainable = ["projector", "fusion", "lm_lora"]
//! epochs = 6
//!
//! [eval]
//! splits = ["dev", "eval"]
//! utts_per_split = 100
//! max_new_tokens = 16
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::decoder::LmPretrainConfig;
use crate::encoder::CtcPretrainConfig;
use crate::error::{Error, Result};
use crate::eval::unit_for;
use crate::fusion::{Mechanism, StreamChoice};
use crate::model::{ModelConfig, ProjectorSpec};
use crate::train::stage::StageConfig;
use crate::train::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_utts: usize,
    pub valid_fraction: f64,
    pub langs: Vec<String>,
    pub generator: DataConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_utts: 600,
            valid_fraction: 0.05,
            langs: crate::eval::LANGUAGES.iter().map(|s| s.to_string()).collect(),
            generator: DataConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub ctc: CtcPretrainConfig,
    pub lm: LmPretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub splits: Vec<String>,
    pub utts_per_split: usize,
    pub max_new_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            splits: vec!["dev".into(), "eval".into()],
            utts_per_split: 100,
            max_new_tokens: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub fusion: StreamChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<StreamChoice>>,
    pub projector: ProjectorSpec,
    pub data: DataSection,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub stages: Vec<StageConfig>,
    pub eval: EvalSection,
}

/// The toy two-stage schedule: projector and fusion first, then LM LoRA
/// joins. The toy peak learning rate is well above the full-scale 1e-4.
pub fn default_stages() -> Vec<StageConfig> {
    let adam = AdamConfig {
        peak_lr: 2e-3,
        warmup_steps: 20,
        ..AdamConfig::default()
    };
    vec![
        StageConfig {
            name: "stage1".into(),
            trainable: vec!["projector".into(), "fusion".into()],
            epochs: 6,
            adam: adam.clone(),
            max_batch_seconds: crate::train::MAX_BATCH_SECONDS,
        },
        StageConfig {
            name: "stage2".into(),
            trainable: vec!["projector".into(), "fusion".into(), "lm_lora".into()],
            epochs: 6,
            adam,
            max_batch_seconds: crate::train::MAX_BATCH_SECONDS,
        },
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            fusion: StreamChoice::Fused(Mechanism::ResGatedBiCaf),
            sweep: None,
            projector: ProjectorSpec::default(),
            data: DataSection::default(),
            model: ModelConfig::default(),
            pretrain: PretrainSection::default(),
            stages: default_stages(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        if self.data.train_utts < 2 {
            return Err(Error::Config("data.train_utts must be at least 2".into()));
        }
        if !(self.data.valid_fraction > 0.0 && self.data.valid_fraction < 1.0) {
            return Err(Error::Config("data.valid_fraction must be in (0, 1)".into()));
        }
        if self.data.langs.is_empty() {
            return Err(Error::Config("data.langs must not be empty".into()));
        }
        for l in &self.data.langs {
            unit_for(l)?;
        }
        let needed = crate::decoder::FIRST_CONTENT + self.data.generator.symbols;
        if self.model.lm.vocab < needed {
            return Err(Error::Config(format!("model.lm.vocab must be at least {needed}")));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one [[stages]] entry is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.stages {
            s.groups()?;
            if s.epochs == 0 {
                return Err(Error::Config(format!("stages.epochs of {:?} must be positive", s.name)));
            }
            if s.name.is_empty() || s.name.contains(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '_')) {
                return Err(Error::Config(format!("stages.name {:?} must be non-empty [A-Za-z0-9_-]", s.name)));
            }
            if !names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("stages.name {:?} is repeated", s.name)));
            }
        }
        let mut splits = std::collections::BTreeSet::new();
        for s in &self.eval.splits {
            if s.is_empty() || s.contains(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '_')) {
                return Err(Error::Config(format!("eval.splits entry {s:?} must be non-empty [A-Za-z0-9_-]")));
            }
            if matches!(s.as_str(), "train" | "valid") || !splits.insert(s.as_str()) {
                return Err(Error::Config(format!("eval.splits entry {s:?} is reserved or repeated")));
            }
        }
        if self.eval.utts_per_split == 0 {
            return Err(Error::Config("eval.utts_per_split must be positive".into()));
        }
        Ok(())
    }

    /// Streams run by a sweep.
    pub fn sweep_streams(&self) -> Vec<StreamChoice> {
        self.sweep.clone().unwrap_or_else(|| {
            Mechanism::ALL
                .into_iter()
                .map(StreamChoice::Fused)
                .chain([StreamChoice::WhisperOnly, StreamChoice::MhubertOnly])
                .collect()
        })
    }

    /// Shrinks data, pretraining and epochs for smoke runs.
    pub fn quick(mut self) -> Self {
        self.data.train_utts = self.data.train_utts.min(160);
        self.pretrain.ctc.epochs = self.pretrain.ctc.epochs.min(1);
        self.pretrain.lm.steps = self.pretrain.lm.steps.min(150);
        for s in &mut self.stages {
            s.epochs = s.epochs.min(2);
        }
        self.eval.utts_per_split = self.eval.utts_per_split.min(20);
        self
    }
}
