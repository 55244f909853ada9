use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::dataset::FRAME_SAMPLES;
use crate::layers::Prior;

/// The four trainable systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// Bayesian head, model uncertainty only (`alpha = 0`).
    Mu,
    /// Bayesian head plus the label-distribution term (`alpha = 1`).
    Lu,
    /// Deterministic single-task baseline.
    Stl,
    /// Deterministic two-head perception-uncertainty baseline.
    MtlPu,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [SystemKind::Mu, SystemKind::Lu, SystemKind::Stl, SystemKind::MtlPu];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::Mu => "mu",
            SystemKind::Lu => "lu",
            SystemKind::Stl => "stl",
            SystemKind::MtlPu => "mtl_pu",
        }
    }

    pub fn is_bayesian(self) -> bool {
        matches!(self, SystemKind::Mu | SystemKind::Lu)
    }

    /// Whether the system produces an uncertainty estimate.
    pub fn predicts_uncertainty(self) -> bool {
        self != SystemKind::Stl
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown system '{s}' (expected mu, lu, stl or mtl_pu)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv: Vec<ConvSpec>,
    /// Extra max-pool after the conv stack.
    pub final_pool: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    /// Hidden widths of the head; a final width-1 linear layer is implied.
    pub head_hidden: Vec<usize>,
    /// Frames sharing one weight draw.
    pub window_frames: usize,
    /// Stochastic passes at inference.
    pub n_infer: usize,
    /// Stochastic passes per training step.
    pub n_train: usize,
    pub prior_mean: f64,
    pub prior_std: f64,
    pub mu_init: [f64; 2],
    pub rho_init: [f64; 2],
    pub alpha: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub sigma_obs: f64,
    pub median_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv: vec![
                ConvSpec { kernel: 8, channels: 64, pool: 10 },
                ConvSpec { kernel: 6, channels: 128, pool: 8 },
                ConvSpec { kernel: 6, channels: 128, pool: 8 },
            ],
            final_pool: 1,
            lstm_layers: 2,
            lstm_hidden: 256,
            head_hidden: vec![64, 64],
            window_frames: 50,
            n_infer: 30,
            n_train: 8,
            prior_mean: 0.0,
            prior_std: 1.0,
            mu_init: [-0.1, 0.1],
            rho_init: [-3.0, -2.0],
            alpha: 1.0,
            dropout: 0.5,
            learning_rate: 1e-4,
            batch_size: 5,
            seq_len: 300,
            epochs: 100,
            seed: 0,
            sigma_obs: 1.0,
            median_window: 50,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.conv.is_empty() {
            return bad("at least one conv block is required".into());
        }
        if self.conv.iter().any(|c| c.kernel == 0 || c.channels == 0 || c.pool == 0) || self.final_pool == 0 {
            return bad("conv kernel sizes, channels and pools must be positive".into());
        }
        let pooling: usize = self.conv.iter().map(|c| c.pool).product::<usize>() * self.final_pool;
        if pooling != FRAME_SAMPLES {
            return bad(format!(
                "pool sizes multiply to {pooling}, but one feature per frame needs {FRAME_SAMPLES}"
            ));
        }
        if self.lstm_layers == 0 || self.lstm_hidden == 0 || self.head_hidden.contains(&0) {
            return bad("layer counts and widths must be positive".into());
        }
        if self.window_frames == 0 {
            return bad("window_frames must be at least 1".into());
        }
        if self.n_infer < 2 || self.n_train < 2 {
            return bad("n_infer and n_train must be at least 2".into());
        }
        if Prior::new(self.prior_mean, self.prior_std).is_none() {
            return bad("prior_std must be positive and finite".into());
        }
        for (name, [lo, hi]) in [("mu_init", self.mu_init), ("rho_init", self.rho_init)] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("{name} must be an increasing finite range"));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.batch_size == 0 || self.seq_len < 2 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive and seq_len at least 2".into());
        }
        if !(self.sigma_obs > 0.0 && self.sigma_obs.is_finite()) {
            return bad("sigma_obs must be positive".into());
        }
        if self.median_window == 0 {
            return bad("median_window must be at least 1".into());
        }
        Ok(())
    }

    pub fn prior(&self) -> Prior {
        Prior::new(self.prior_mean, self.prior_std).expect("validated prior")
    }

    /// Copy with `alpha` set as the system requires.
    pub fn for_system(&self, kind: SystemKind) -> Self {
        let mut c = self.clone();
        c.alpha = match kind {
            SystemKind::Lu => 1.0,
            _ => 0.0,
        };
        c
    }

    pub fn feature_width(&self) -> usize {
        self.conv.last().map_or(1, |c| c.channels)
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.window_frames, 50);
        assert_eq!(c.n_infer, 30);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_size, 5);
        assert_eq!(c.seq_len, 300);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.dropout, 0.5);
    }

    #[test]
    fn pooling_must_cover_a_frame() {
        let mut c = ModelConfig::default();
        c.conv[0].pool = 5;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(m)) if m.contains("320")));
        c.final_pool = 2;
        c.validate().unwrap();
    }

    #[test]
    fn invalid_values_rejected() {
        let base = ModelConfig::default();
        for c in [
            ModelConfig { alpha: -1.0, ..base.clone() },
            ModelConfig { window_frames: 0, ..base.clone() },
            ModelConfig { n_infer: 1, ..base.clone() },
            ModelConfig { dropout: 1.0, ..base.clone() },
            ModelConfig { rho_init: [-2.0, -3.0], ..base.clone() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn system_alpha_and_hash() {
        let c = ModelConfig::default();
        assert_eq!(c.for_system(SystemKind::Lu).alpha, 1.0);
        assert_eq!(c.for_system(SystemKind::Mu).alpha, 0.0);
        assert_ne!(c.for_system(SystemKind::Lu).hash(), c.for_system(SystemKind::Mu).hash());
        assert_eq!(c.hash(), c.clone().hash());
        assert_eq!("mtl_pu".parse::<SystemKind>().unwrap(), SystemKind::MtlPu);
    }
}
