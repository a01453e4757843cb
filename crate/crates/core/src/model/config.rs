use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::nn::RegularizationConfig;

/// The classifier always has exactly two output units.
pub const OUTPUT_UNITS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmallConvConfig {
    pub in_channels: usize,
    pub input_size: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for SmallConvConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            input_size: 50,
            channels: vec![16, 32, 64],
            kernel: 3,
        }
    }
}

impl SmallConvConfig {
    /// Spatial size after each block. Every block but the last ends in a 2×2 max
    /// pool; the last block feeds the global max pool directly.
    pub fn block_sizes(&self) -> Result<Vec<usize>, ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("small_conv needs at least one block with nonzero channels".into());
        }
        if self.kernel == 0 || self.in_channels == 0 {
            return bad("kernel and in_channels must be positive".into());
        }
        let mut size = self.input_size;
        let mut sizes = Vec::new();
        for (i, _) in self.channels.iter().enumerate() {
            if size < self.kernel {
                return bad(format!("block {i}: input {size}px is smaller than the {}px kernel", self.kernel));
            }
            size = size - self.kernel + 1;
            if i + 1 < self.channels.len() {
                if !size.is_multiple_of(2) {
                    return bad(format!("block {i}: {size}px conv output cannot be pooled 2×2 without remainder"));
                }
                size /= 2;
            }
            sizes.push(size);
        }
        Ok(sizes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Backbone {
    SmallConv(SmallConvConfig),
    /// Head only, trained on precomputed embedding vectors of length `dim`.
    FeatureFile { dim: usize },
}

impl Default for Backbone {
    fn default() -> Self {
        Backbone::SmallConv(SmallConvConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub hidden_units: usize,
    pub regularization: RegularizationConfig,
    pub dropout_rate: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
            hidden_units: 256,
            regularization: RegularizationConfig::default(),
            dropout_rate: 0.45,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn feature_file(dim: usize) -> Self {
        Self {
            backbone: Backbone::FeatureFile { dim },
            head: HeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match &self.backbone {
            Backbone::SmallConv(c) => {
                c.block_sizes()?;
            }
            Backbone::FeatureFile { dim: 0 } => {
                return Err(ModelError::InvalidConfig("feature dim must be positive".into()));
            }
            Backbone::FeatureFile { .. } => {}
        }
        let h = &self.head;
        if h.hidden_units == 0 {
            return Err(ModelError::InvalidConfig("hidden_units must be positive".into()));
        }
        if !(0.0..1.0).contains(&h.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!("dropout_rate {} outside [0, 1)", h.dropout_rate)));
        }
        if !(0.0..=1.0).contains(&h.bn_momentum) || h.bn_epsilon <= 0.0 {
            return Err(ModelError::InvalidConfig("batch-norm momentum must be in [0, 1] and epsilon > 0".into()));
        }
        if h.regularization.lambda1 < 0.0 || h.regularization.lambda2 < 0.0 {
            return Err(ModelError::InvalidConfig("regularization weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Shape of one input sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match &self.backbone {
            Backbone::SmallConv(c) => vec![c.in_channels, c.input_size, c.input_size],
            Backbone::FeatureFile { dim } => vec![*dim],
        }
    }

    /// Width of the vector entering the head.
    pub fn embedding_dim(&self) -> usize {
        match &self.backbone {
            Backbone::SmallConv(c) => *c.channels.last().unwrap_or(&0),
            Backbone::FeatureFile { dim } => *dim,
        }
    }

    /// SHA-256 of the canonical JSON encoding; stored in every checkpoint.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(ModelError::InvalidConfig(
                "batch_size must be at least 2 (batch normalization needs two samples)".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spatial_sizes() {
        let sizes = SmallConvConfig::default().block_sizes().unwrap();
        assert_eq!(sizes, vec![24, 11, 9]);
    }

    #[test]
    fn odd_pool_input_is_rejected() {
        let cfg = SmallConvConfig {
            input_size: 49,
            ..Default::default()
        };
        assert!(matches!(cfg.block_sizes(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn config_json_round_trip_and_hash() {
        let cfg = ModelConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"kind\":\"small_conv\""));
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(ModelConfig::feature_file(64).hash(), cfg.hash());
        let partial: ModelConfig = serde_json::from_str(r#"{"head":{"dropout_rate":0.3}}"#).unwrap();
        assert_eq!(partial.head.hidden_units, 256);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"heads":{}}"#).is_err());
    }

    #[test]
    fn training_config_guards() {
        assert!(TrainingConfig::default().validate().is_ok());
        let zero = TrainingConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        let tiny = TrainingConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(tiny.validate().is_err());
    }
}
