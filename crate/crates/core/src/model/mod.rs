//! The translation model: backbone, domain discriminator and expert bank.
//!
//! All three parts keep their parameters in one [`ParamStore`] under
//! disjoint name prefixes, so freezing a stage is a matter of choosing which
//! prefixes a graph binds as trainable.

mod backbone;
pub mod beam;
mod config;
pub mod discriminator;
pub mod experts;

pub use backbone::{EncoderOutput, PaddedBatch};
pub use config::{ModelConfig, OptimConfig};
pub use experts::{ExpertPlan, RoutingDecision, RoutingMode};

use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::scalar::Scalar;

pub const ENCODER_PREFIX: &str = "enc.";
pub const DECODER_PREFIX: &str = "dec.";
pub const SHARED_EMBED: &str = "shared.embed";
pub const DISCRIMINATOR_PREFIX: &str = "disc.";
pub const EXPERT_PREFIX: &str = "expert.";

/// Name prefixes of every backbone tensor.
pub const BACKBONE_PREFIXES: [&str; 3] = [ENCODER_PREFIX, DECODER_PREFIX, "shared."];

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized backbone with no discriminator or experts.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed).derive_named("init.backbone", 0);
        let params = backbone::init_params(&config, &mut rng);
        Ok(Model { config, params })
    }

    pub fn has_discriminator(&self) -> bool {
        self.params.contains(discriminator::W2)
    }

    pub fn has_experts(&self) -> bool {
        self.params.names().any(|n| n.starts_with(EXPERT_PREFIX))
    }

    /// Add freshly initialized discriminator parameters, replacing any existing ones.
    pub fn init_discriminator(&mut self, seed: u64) {
        self.params.remove_prefix(DISCRIMINATOR_PREFIX);
        let mut rng = RngStream::new(seed).derive_named("init.discriminator", 0);
        discriminator::init_params(&self.config, &mut self.params, &mut rng);
    }

    /// Add freshly initialized (identity) experts, replacing any existing ones.
    pub fn init_experts(&mut self, seed: u64) {
        self.params.remove_prefix(EXPERT_PREFIX);
        let mut rng = RngStream::new(seed).derive_named("init.experts", 0);
        experts::init_params(&self.config, &mut self.params, &mut rng);
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn backbone_hash(&self) -> String {
        self.params.hash_prefixes(&BACKBONE_PREFIXES)
    }

    /// Hash of everything frozen during expert training.
    pub fn backbone_and_discriminator_hash(&self) -> String {
        let mut p = BACKBONE_PREFIXES.to_vec();
        p.push(DISCRIMINATOR_PREFIX);
        self.params.hash_prefixes(&p)
    }
}
