use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneKind, DEFAULT_EMBED_DIM};
use crate::data::{SplitParams, SynthParams};
use crate::diffusion::{DiffusionConfig, DEFAULT_BETA, DEFAULT_STEPS};
use crate::error::{CsdmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Movielens,
    Synthetic,
}

/// Every knob of one experiment, as flat keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub backbone: BackboneKind,
    pub dim: usize,
    pub pretrain_epochs: usize,
    pub diffusion_epochs: usize,
    /// Passes over each warm group.
    pub warm_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta: f64,
    pub rho: f64,
    pub s: usize,
    pub sigma_frac: f64,
    pub dropout_p: f64,
    pub hidden_dim: usize,
    pub denoiser_width: usize,
    /// Old/new item frequency threshold `N`; also the output gate constant.
    pub threshold: usize,
    /// Instances per item in each warm group, `K`.
    pub group_size: usize,
    pub seed: u64,
    pub source: DataSource,
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_instances: usize,
    pub synth_side_signal: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthParams::default();
        Self {
            backbone: BackboneKind::DeepFm,
            dim: DEFAULT_EMBED_DIM,
            pretrain_epochs: 3,
            diffusion_epochs: 2,
            warm_epochs: 10,
            lr: 1e-3,
            batch_size: 2048,
            steps: DEFAULT_STEPS,
            beta: DEFAULT_BETA,
            rho: 0.1,
            s: 10,
            sigma_frac: 0.0,
            dropout_p: 0.5,
            hidden_dim: 16,
            denoiser_width: 64,
            threshold: 200,
            group_size: 20,
            seed: 0,
            source: DataSource::Movielens,
            synth_users: synth.n_users,
            synth_items: synth.n_items,
            synth_instances: synth.n_instances,
            synth_side_signal: synth.side_signal,
        }
    }
}

impl ExperimentConfig {
    /// Settings sized for the synthetic generator: smaller groups and
    /// batches, more passes.
    pub fn synthetic() -> Self {
        Self {
            source: DataSource::Synthetic,
            threshold: 60,
            group_size: 5,
            batch_size: 256,
            pretrain_epochs: 4,
            diffusion_epochs: 8,
            warm_epochs: 2,
            lr: 5e-3,
            ..Self::default()
        }
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig {
            steps: self.steps,
            beta: self.beta,
            rho: self.rho,
            stride: self.s,
            sigma_frac: self.sigma_frac,
            dropout_p: self.dropout_p,
            hidden_dim: self.hidden_dim,
            denoiser_width: self.denoiser_width,
            gate: self.threshold as f64,
        }
    }

    pub fn split(&self) -> SplitParams {
        SplitParams {
            threshold: self.threshold,
            group_size: self.group_size,
        }
    }

    pub fn synth(&self) -> SynthParams {
        SynthParams {
            seed: self.seed,
            n_users: self.synth_users,
            n_items: self.synth_items,
            n_instances: self.synth_instances,
            side_signal: self.synth_side_signal,
            ..SynthParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CsdmError::Validation(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if self.threshold == 0 || self.group_size == 0 {
            return bad("threshold and group_size must be positive".into());
        }
        self.diffusion().validate()
    }

    /// Short stable digest of the configuration, used to name run directories.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::data::hex_digest(&json)[..8].to_string()
    }

    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.hash(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_reject_unknown_keys() {
        let c = ExperimentConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(c, back);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"rho": 1.0, "backbone": "dcn"}"#).unwrap();
        assert_eq!(partial.rho, 1.0);
        assert_eq!(partial.backbone, BackboneKind::Dcn);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"rhoo": 1.0}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            rho: 1.0,
            ..a.clone()
        };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 8);
    }

    #[test]
    fn validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        assert!(ExperimentConfig {
            s: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ExperimentConfig {
            s: 101,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ExperimentConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
