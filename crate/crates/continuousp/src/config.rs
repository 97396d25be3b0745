//! Run configuration files: a flat TOML table whose keys mirror the model,
//! trainer, and annealing-schedule field names. Unknown keys are rejected so
//! a misspelled hyperparameter cannot silently fall back to its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::GraphConfig;
use crate::model::{ModelConfig, PenaltyKind};
use crate::sampler::AnnealSchedule;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Energy model.
    pub node_dim: usize,
    pub conv_layers: usize,
    pub mlp_layers: usize,
    pub rho_ref: f64,
    pub penalty_weight: f64,
    pub penalty_kind: PenaltyKind,
    pub cutoff_multiplier: f64,
    pub smear_max: f64,
    pub smear_coeff: f64,
    pub edge_dim: usize,
    // Trainer.
    pub q: f64,
    pub beta_train: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub j_cap: Option<u32>,
    pub train_chain_steps: usize,
    pub seed: u64,
    // Sampling schedule.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::small();
        let t = TrainConfig::default();
        let s = AnnealSchedule::default();
        RunConfig {
            node_dim: m.node_dim,
            conv_layers: m.conv_layers,
            mlp_layers: m.mlp_layers,
            rho_ref: m.rho_ref,
            penalty_weight: m.penalty_weight,
            penalty_kind: m.penalty_kind,
            cutoff_multiplier: m.graph.cutoff_multiplier,
            smear_max: m.graph.smear_max,
            smear_coeff: m.graph.smear_coeff,
            edge_dim: m.graph.edge_dim,
            q: t.q,
            beta_train: t.beta_train,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            j_cap: t.j_cap,
            train_chain_steps: t.train_chain_steps,
            seed: t.seed,
            steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            alpha_start: s.alpha_start,
            alpha_end: s.alpha_end,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.as_ref().display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.trainer().validate()?;
        self.schedule().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            node_dim: self.node_dim,
            conv_layers: self.conv_layers,
            mlp_layers: self.mlp_layers,
            rho_ref: self.rho_ref,
            penalty_weight: self.penalty_weight,
            penalty_kind: self.penalty_kind,
            graph: GraphConfig {
                cutoff_multiplier: self.cutoff_multiplier,
                smear_max: self.smear_max,
                smear_coeff: self.smear_coeff,
                edge_dim: self.edge_dim,
            },
        }
    }

    pub fn trainer(&self) -> TrainConfig {
        TrainConfig {
            q: self.q,
            beta_train: self.beta_train,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            epochs: self.epochs,
            batch_size: self.batch_size,
            j_cap: self.j_cap,
            train_chain_steps: self.train_chain_steps,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            alpha_start: self.alpha_start,
            alpha_end: self.alpha_end,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_module_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model(), ModelConfig::small());
        assert_eq!(cfg.trainer(), TrainConfig::default());
        assert_eq!(cfg.schedule(), AnnealSchedule::default());
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "node_dim = 8\nlearning_rate = 0.01\npenalty_kind = \"abs\"\n")
            .expect("write");
        let cfg = RunConfig::load(&path).expect("load");
        assert_eq!(cfg.node_dim, 8);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.penalty_kind, PenaltyKind::Abs);
        assert_eq!(cfg.conv_layers, ModelConfig::small().conv_layers);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "node_dmi = 8\n").expect("write");
        match RunConfig::load(&path) {
            Err(Error::InvalidConfig(msg)) => {
                assert!(msg.contains("node_dmi"), "message names the key: {msg}")
            }
            other => panic!("expected invalid config, got {other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected_on_load() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "q = 1.5\n").expect("write");
        assert!(matches!(RunConfig::load(&path), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.j_cap = Some(5);
        cfg.adam_eps = 3e-9;
        let text = toml::to_string(&cfg).expect("serialize");
        let back: RunConfig = toml::from_str(&text).expect("parse");
        assert_eq!(back, cfg);
    }
}
