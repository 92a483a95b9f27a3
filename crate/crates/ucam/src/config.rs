//! Run configuration: documented defaults, a flat JSON config file, the
//! `UCAM_SEED` environment override, and command-line flags, applied in
//! that precedence order (defaults < file < env < flags).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data;
use crate::gca::{GcaConfig, MaskNormalization, McSettings, TrainHyper};
use crate::losses::{Mode, PerturbScale, UdlVariant};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::{Error, Result};

pub const SEED_ENV_VAR: &str = "UCAM_SEED";

/// Every tunable of a run. Unknown keys in a config file are rejected;
/// missing keys fall back to the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; all randomness is derived from it.
    pub seed: u64,
    /// Ablation mode (see `Mode::ALL` for the full list).
    pub mode: Mode,

    // Model shape (attention grid matches the dataset grid).
    pub grid_u: usize,
    pub grid_v: usize,
    pub c_img: usize,
    pub d_q: usize,
    pub d_att: usize,
    pub d_feat: usize,
    pub hidden: usize,
    /// Dropout on the classifier hidden layers.
    pub dropout_rate: f64,

    /// Monte Carlo samples during training.
    pub mc_train_samples: usize,
    /// Monte Carlo samples for uncertainty analysis.
    pub mc_analysis_samples: usize,
    pub perturb_scale: PerturbScale,

    /// Variance-equalizer reference constant.
    pub sigma0: f64,
    /// Negative-branch scale of the distorted-gap penalty.
    pub udl_alpha: f64,
    pub udl_variant: UdlVariant,
    /// Weight of the uncertainty loss in the joint cost.
    pub eta_loss: f64,

    /// Certainty-mask product scale.
    pub lambda: f64,
    /// Certainty-mask negative multiplier (<= 0).
    pub gamma: f64,
    pub normalization: MaskNormalization,
    pub eps_norm: f64,

    /// Adam learning rate for the classification partitions.
    pub lr: f64,
    /// SGD learning rate for the variance head.
    pub lr_uncertainty: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Batch size (desk-scale default 64; the reference setup used 200).
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Baseline,
            grid_u: 7,
            grid_v: 7,
            c_img: 32,
            d_q: 32,
            d_att: 32,
            d_feat: 32,
            hidden: 64,
            dropout_rate: 0.3,
            mc_train_samples: 10,
            mc_analysis_samples: 25,
            perturb_scale: PerturbScale::Stddev,
            sigma0: 0.0,
            udl_alpha: 1.0,
            udl_variant: UdlVariant::Piecewise,
            eta_loss: 0.5,
            lambda: 1.0,
            gamma: -10.0,
            normalization: MaskNormalization::Softmax,
            eps_norm: 1e-12,
            lr: 1e-4,
            lr_uncertainty: 0.004,
            beta1: 0.95,
            beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 30,
        }
    }
}

impl RunConfig {
    /// Parses a flat JSON config file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Applies the `UCAM_SEED` environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV_VAR) {
            self.seed = raw
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV_VAR}={raw:?} is not a u64")))?;
        }
        Ok(())
    }

    /// Resolves defaults < config file < environment; command-line flags
    /// are applied on top by the caller.
    pub fn resolve(file: Option<&Path>) -> Result<Self> {
        let mut cfg = match file {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.gca_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.mc_train_samples == 0 || self.mc_analysis_samples == 0 {
            return Err(Error::Config("MC sample counts must be positive".into()));
        }
        if !(self.eta_loss.is_finite() && self.lr > 0.0 && self.lr_uncertainty > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            grid_u: self.grid_u,
            grid_v: self.grid_v,
            n_symbols: data::N_SYMBOLS,
            vocab_size: data::QUESTION_VOCAB.len(),
            c_img: self.c_img,
            d_q: self.d_q,
            d_att: self.d_att,
            d_feat: self.d_feat,
            hidden: self.hidden,
            c_ans: data::ANSWER_SPACE.len(),
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn gca_config(&self) -> GcaConfig {
        GcaConfig {
            lambda: self.lambda,
            gamma: self.gamma,
            normalization: self.normalization,
            eps_norm: self.eps_norm,
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            mode: self.mode,
            eta_loss: self.eta_loss,
            sigma0: self.sigma0,
            udl_alpha: self.udl_alpha,
            udl_variant: self.udl_variant,
            dropout_rate: self.dropout_rate,
            mc: Some(McSettings {
                samples: self.mc_train_samples,
                perturb_scale: self.perturb_scale,
            }),
            gca: self.gca_config(),
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_documented_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.mc_train_samples, 10);
        assert_eq!(cfg.mc_analysis_samples, 25);
        assert_eq!(cfg.gamma, -10.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn file_overrides_defaults_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"mode": "p-gca", "epochs": 3}"#).unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.mode, Mode::PGca);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 64); // untouched default

        std::fs::write(&path, r#"{"epoch": 3}"#).unwrap();
        assert!(matches!(RunConfig::from_file(&path), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_mode_in_file_is_rejected_with_valid_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"mode": "warp"}"#).unwrap();
        match RunConfig::from_file(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("a-gca")),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
