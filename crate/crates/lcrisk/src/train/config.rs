//! Training configuration with the reference recipe as defaults.

use serde::{Deserialize, Serialize};

use super::TrainError;

/// The optimization recipe: 75:15:10 splits, batch size 64, Adadelta at
/// lr 0.01 (rho 0.9, eps 1e-6), value clipping to (-5, 5), and learning-rate
/// decay by 0.8 after 8 consecutive epochs without validation improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub clip_bounds: (f64, f64),
    pub max_epochs: usize,
    pub seed: u64,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub split: (f64, f64, f64),
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 0.01,
            lr_decay: 0.8,
            patience: 8,
            clip_bounds: (-5.0, 5.0),
            max_epochs: 50,
            seed: 42,
            adadelta_rho: 0.9,
            adadelta_eps: 1e-6,
            split: (0.75, 0.15, 0.10),
            folds: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let (a, b, c) = self.split;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(TrainError::Config("split ratios must be positive".into()));
        }
        if ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(TrainError::Config(format!(
                "split ratios must sum to 1, got {}",
                a + b + c
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.folds < 2 {
            return Err(TrainError::Config(
                "batch_size and max_epochs must be positive, folds at least 2".into(),
            ));
        }
        if self.lr <= 0.0 || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(TrainError::Config("lr must be positive and decay in (0, 1]".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adadelta_rho) || self.adadelta_eps <= 0.0 {
            return Err(TrainError::Config("rho must be in [0,1), eps positive".into()));
        }
        if self.clip_bounds.0 >= self.clip_bounds.1 {
            return Err(TrainError::Config("clip lower bound must be below upper".into()));
        }
        Ok(())
    }

    /// Parse a JSON config; unknown keys are rejected, missing keys take the
    /// reference defaults.
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let config: TrainConfig =
            serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_encode_the_reference_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.lr_decay, 0.8);
        assert_eq!(c.patience, 8);
        assert_eq!(c.clip_bounds, (-5.0, 5.0));
        assert_eq!(c.adadelta_rho, 0.9);
        assert_eq!(c.adadelta_eps, 1e-6);
        assert_eq!(c.split, (0.75, 0.15, 0.10));
        assert_eq!(c.folds, 3);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_json(r#"{"batch_size": 8, "turbo": true}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"batch_size": 8}"#).is_ok());
    }

    #[test]
    fn bad_split_is_rejected() {
        assert!(TrainConfig::from_json(r#"{"split": [0.5, 0.2, 0.2]}"#).is_err());
    }
}
