use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::SeqCoConfig;
use crate::optim::{AdamConfig, ScheduleConfig};

use super::ablate::AblationRow;

/// Everything one run needs. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    /// Trigram blocking for the greedy Ŷ generated during training.
    #[serde(default)]
    pub train_block_trigrams: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub seqco: SeqCoConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub ablation: Vec<AblationRow>,
}

fn default_batch_size() -> usize {
    16
}

fn default_eval_interval() -> u64 {
    250
}

fn default_smoothing() -> f64 {
    0.1
}

impl ExperimentConfig {
    /// Defaults everywhere except the seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            out_dir: None,
            batch_size: default_batch_size(),
            eval_interval: default_eval_interval(),
            label_smoothing: default_smoothing(),
            train_block_trigrams: false,
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            seqco: SeqCoConfig::default(),
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            decode: DecodeConfig::default(),
            ablation: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The resolved config as TOML, archived beside every run.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn corpus_seed(&self) -> u64 {
        self.corpus.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.seqco.validate()?;
        self.schedule.validate()?;
        self.adam.validate()?;
        self.decode.validate()?;
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch_size and eval_interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(Error::Config(format!(
                "model vocab_size {} differs from corpus vocab_size {}",
                self.model.vocab_size, self.corpus.vocab_size
            )));
        }
        let max = self.model.max_positions;
        if self.corpus.doc_cap > max || self.corpus.sum_cap > max || self.decode.max_len + 2 > max {
            return Err(Error::Config(format!("sequence caps exceed max_positions {max}")));
        }
        if !self.model.d_model.is_multiple_of(self.seqco.align_heads) {
            return Err(Error::Config("seqco.align_heads must divide d_model".into()));
        }
        if self.corpus.sum_cap < 5 {
            return Err(Error::Config("sum_cap must leave room for a two-token generated summary".into()));
        }
        for row in &self.ablation {
            row.apply(&self.seqco).validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(ExperimentConfig::from_toml("batch_size = 4"), Err(Error::Config(_))));
        let cfg = ExperimentConfig::from_toml("seed = 3").unwrap();
        assert_eq!(cfg, ExperimentConfig::with_seed(3));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("seed = 1\n[model]\nwidth = 3").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::with_seed(9);
        cfg.seqco.lambda_y_yhat = 0.5;
        cfg.ablation = super::super::ablate::default_grid(1.0);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn vocab_sizes_must_agree() {
        let text = "seed = 1\n[model]\nvocab_size = 40";
        assert!(ExperimentConfig::from_toml(text).is_err());
    }
}
