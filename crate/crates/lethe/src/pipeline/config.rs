//! The experiment configuration file. One global seed deterministically
//! derives every stage seed; section seeds in the file are ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSpec;
use crate::error::Result;
use crate::inversion::{AnnotatorSpec, InverterConfig};
use crate::model::{DecodeConfig, ModelConfig, TrainConfig};
use crate::rng::derive_seed;
use crate::unlearn::{UnlearnConfig, UnlearnMode};

/// Overrides the external annotator endpoint when set.
pub const ANNOTATOR_ENDPOINT_ENV: &str = "LETHE_ANNOTATOR_ENDPOINT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverterSection {
    /// Defender-side template renders used as inverter training texts.
    pub training_records: usize,
    #[serde(flatten)]
    pub config: InverterConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub global_seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub inverter: InverterSection,
    pub annotator: AnnotatorSpec,
    pub unlearn: UnlearnConfig,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            global_seed: 42,
            output_dir: PathBuf::from("runs/desk"),
            model: ModelConfig::default(),
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            inverter: InverterSection {
                training_records: 1200,
                config: InverterConfig::default(),
            },
            annotator: AnnotatorSpec::default(),
            unlearn: UnlearnConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.train.validate()?;
        self.unlearn.validate()?;
        self.decode.validate()?;
        Ok(())
    }

    /// Stage seeds, all derived from the global seed.
    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.global_seed, label)
    }

    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.seed = self.seed("model-init");
        m
    }

    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed("train");
        t
    }

    pub fn effective_inverter(&self) -> InverterConfig {
        let mut i = self.inverter.config.clone();
        i.seed = self.seed("inverter");
        i
    }

    pub fn effective_unlearn(&self, mode: UnlearnMode) -> UnlearnConfig {
        let mut u = self.unlearn.clone();
        u.mode = mode;
        u.seed = self.seed(&format!("unlearn/{}", mode.name()));
        u
    }

    pub fn effective_decode(&self) -> DecodeConfig {
        let mut d = self.decode.clone();
        d.seed = self.seed("decode");
        d
    }

    /// Annotator spec with the endpoint environment override applied.
    pub fn effective_annotator(&self) -> AnnotatorSpec {
        let mut a = self.annotator.clone();
        if let Ok(endpoint) = std::env::var(ANNOTATOR_ENDPOINT_ENV) {
            if !endpoint.is_empty() {
                a.endpoint = Some(endpoint);
            }
        }
        if a.audit_log.is_none() {
            a.audit_log = Some(self.output_dir.join("annotator_audit.jsonl"));
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn seeds_are_stage_separated_and_stable() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.seed("model-init"), cfg.seed("train"));
        assert_eq!(
            cfg.effective_model().seed,
            ExperimentConfig::default().effective_model().seed
        );
        let mut other = ExperimentConfig::default();
        other.global_seed = 43;
        assert_ne!(cfg.effective_model().seed, other.effective_model().seed);
    }

    #[test]
    fn validation_catches_bad_sections() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.n_heads = 3; // 128 % 3 != 0
        assert!(cfg.validate().is_err());
    }
}
