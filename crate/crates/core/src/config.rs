//! Experiment configuration: every knob of the synthetic end-to-end run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::embedding::{feature_dim, Word2VecConfig};
use crate::evaluator::EvalConfig;
use crate::lstm::ModelConfig;
use crate::synthgen::GenParams;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// The frozen acceptance instance.
pub const ACCEPTANCE_TOML: &str = include_str!("../../../configs/acceptance.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogParams {
    pub teams: usize,
    pub stages: usize,
    pub items_per_cell: usize,
    pub seed: u64,
}

/// Network widths; the remaining dimensions follow from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub hidden1: usize,
    pub hidden2: usize,
    pub seed: u64,
}

impl ModelShape {
    pub fn resolve(&self, corpus: &CorpusConfig, embedding_dim: usize, n_outputs: usize) -> ModelConfig {
        ModelConfig {
            seq_len_in: corpus.input_len(),
            feature_dim: feature_dim(embedding_dim),
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            n_outputs,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub catalog: CatalogParams,
    pub histories: GenParams,
    pub corpus: CorpusConfig,
    pub embedding: Word2VecConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn acceptance() -> Self {
        Self::from_toml(ACCEPTANCE_TOML).expect("the bundled acceptance config parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.histories.validate()?;
        self.corpus.validate()?;
        self.embedding.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_matches_generator_defaults() {
        let cfg = ExperimentConfig::acceptance();
        assert_eq!(
            (cfg.catalog.teams, cfg.catalog.stages, cfg.catalog.items_per_cell),
            (20, 3, 10)
        );
        let h = cfg.histories;
        let d = GenParams::default();
        assert_eq!(
            (h.n_users, h.min_orders, h.max_orders, h.p_adv, h.p_switch),
            (d.n_users, d.min_orders, d.max_orders, d.p_adv, d.p_switch)
        );
        assert_eq!(cfg.corpus.seq_len, 12);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{ACCEPTANCE_TOML}\n[extra]\nx = 1\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
