//! Run configuration: one TOML or JSON file holding every module's settings.
//! Command-line flags override individual values.

use std::fs;
use std::path::Path;

use lrlm_core::corpus::{DedupLevel, NormConfig, PlainTextMode};
use lrlm_core::heads::FineTuneConfig;
use lrlm_core::mlm::MaskingPolicy;
use lrlm_core::model::{ModelConfig, PretrainSchedule};
use lrlm_core::tokenizer::TrainerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; module seeds default to it.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub norm: NormConfig,
    pub tokenizer: TrainerConfig,
    pub masking: MaskingPolicy,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FineTuneSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus: CorpusSection::default(),
            norm: NormConfig::default(),
            tokenizer: TrainerConfig::default(),
            masking: MaskingPolicy::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FineTuneSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Read `.toml` or `.json` (by extension); `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub plain_text: PlainTextMode,
    pub dedup: DedupLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Tiny,
    Production,
}

/// A preset plus optional per-field overrides; the vocabulary size always
/// comes from the trained vocabulary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub hidden_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub ff_dim: Option<usize>,
    pub max_positions: Option<usize>,
    pub dropout_prob: Option<f64>,
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize) -> ModelConfig {
        let mut cfg = match self.preset {
            Preset::Desk => ModelConfig::desk(vocab_size),
            Preset::Tiny => ModelConfig::tiny(vocab_size),
            Preset::Production => ModelConfig {
                vocab_size,
                ..ModelConfig::production()
            },
        };
        if let Some(v) = self.hidden_dim {
            cfg.hidden_dim = v;
        }
        if let Some(v) = self.num_layers {
            cfg.num_layers = v;
        }
        if let Some(v) = self.num_heads {
            cfg.num_heads = v;
        }
        if let Some(v) = self.ff_dim {
            cfg.ff_dim = v;
        }
        if let Some(v) = self.max_positions {
            cfg.max_positions = v;
        }
        if let Some(v) = self.dropout_prob {
            cfg.dropout_prob = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    /// Sequence length including `[CLS]` and `[SEP]`.
    pub max_len: usize,
    #[serde(flatten)]
    pub schedule: PretrainSchedule,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            max_len: 32,
            schedule: PretrainSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneSection {
    pub max_len: usize,
    /// Train/validation/test ratios used when no validation file is given.
    pub split: [f64; 3],
    /// Random-search trials; 0 trains once with the settings below.
    pub search_trials: usize,
    #[serde(flatten)]
    pub train: FineTuneConfig,
}

impl Default for FineTuneSection {
    fn default() -> Self {
        Self {
            max_len: 32,
            split: [0.8, 0.1, 0.1],
            search_trials: 0,
            train: FineTuneConfig {
                epochs: 10,
                ..FineTuneConfig::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg: PipelineConfig = toml::from_str(
            "seed = 7\n[pretrain]\nsteps = 20\n[model]\npreset = \"tiny\"\nmax_positions = 32\n[finetune]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pretrain.schedule.steps, 20);
        assert_eq!(cfg.pretrain.schedule.batch_size, 16);
        assert_eq!(cfg.finetune.train.epochs, 3);
        let m = cfg.model.resolve(100);
        assert_eq!((m.hidden_dim, m.max_positions, m.vocab_size), (8, 32, 100));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>("sed = 7").is_err());
    }
}
