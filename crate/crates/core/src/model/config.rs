use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamConfig;

/// Optimizer and schedule constants shared by every training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    pub warmup: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Number of batches whose gradients are summed per update.
    pub update_freq: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            peak_lr: 0.002,
            warmup: 400,
            clip_norm: None,
            update_freq: 1,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Architecture and routing hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// One embedding table shared by source and target (requires equal vocab sizes).
    pub joint_vocab: bool,
    pub max_len: usize,
    pub num_experts: usize,
    pub expert_inner_dim: usize,
    pub routing_k: usize,
    pub temperature: f64,
    /// Draw an independent routing sample for every decoder layer instead of
    /// one per sentence.
    pub route_per_layer: bool,
    pub dropout: f64,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Laptop-scale defaults.
    pub fn desk() -> Self {
        ModelConfig {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            src_vocab: 0,
            tgt_vocab: 0,
            joint_vocab: false,
            max_len: 64,
            num_experts: 4,
            expert_inner_dim: 32,
            routing_k: 2,
            temperature: 1.0,
            route_per_layer: false,
            dropout: 0.0,
            optim: OptimConfig::default(),
            seed: 1,
        }
    }

    /// Published full-scale configuration.
    pub fn paper_scale() -> Self {
        ModelConfig {
            num_layers: 6,
            model_dim: 512,
            num_heads: 8,
            ffn_dim: 2048,
            max_len: 256,
            num_experts: 12,
            expert_inner_dim: 128,
            routing_k: 4,
            temperature: 1.0,
            optim: OptimConfig {
                peak_lr: 0.0007,
                warmup: 4000,
                ..OptimConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return fail("layers, model_dim and ffn_dim must be positive".into());
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.num_experts == 0 {
            return fail("num_experts must be >= 1".into());
        }
        if self.routing_k == 0 || self.routing_k > self.num_experts {
            return fail(format!(
                "routing_k {} must lie in [1, {}]",
                self.routing_k, self.num_experts
            ));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be > 0", self.temperature));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.max_len < 2 {
            return fail("max_len must be >= 2".into());
        }
        if self.joint_vocab && self.src_vocab != self.tgt_vocab {
            return fail("joint_vocab requires equal source and target vocab sizes".into());
        }
        if self.optim.update_freq == 0 || self.optim.warmup == 0 || !(self.optim.peak_lr > 0.0) {
            return fail("update_freq, warmup and peak_lr must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        let mut c = ModelConfig::desk();
        c.src_vocab = 10;
        c.tgt_vocab = 10;
        c.validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
        assert_eq!(ModelConfig::paper_scale().num_experts, 12);
    }

    #[test]
    fn rejects_bad_routing() {
        let mut c = ModelConfig::desk();
        c.routing_k = 5;
        assert!(c.validate().is_err());
        c.routing_k = 2;
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        c.temperature = 1.0;
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }
}
