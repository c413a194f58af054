use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::ClusteringConfig;
use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::RngStream;
use crate::train::TrainConfig;

/// Where the parallel data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Directory of plain-text splits; when absent the generator is used.
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            dir: None,
            synth: SynthConfig::four_domain(0.3, 14_000, 2_000, 1),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringSection {
    #[serde(flatten)]
    pub params: ClusteringConfig,
    /// Anchor file, one `sentence<TAB>domain` per line.
    pub anchors: Option<PathBuf>,
    /// Take this many anchors per domain from the dev split instead of a file.
    pub anchors_per_domain: usize,
}

/// Per-stage seeds; unset ones derive from `master` (53-bit, so they survive
/// TOML and JSON round trips).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub master: u64,
    pub backbone: Option<u64>,
    pub clustering: Option<u64>,
    pub discriminator: Option<u64>,
    pub experts: Option<u64>,
}

impl Seeds {
    fn pick(&self, explicit: Option<u64>, stage: &str) -> u64 {
        explicit.unwrap_or_else(|| RngStream::new(self.master).derive_named(stage, 0).next_u64() >> 11)
    }

    pub fn backbone(&self) -> u64 {
        self.pick(self.backbone, "seed.backbone")
    }

    pub fn clustering(&self) -> u64 {
        self.pick(self.clustering, "seed.clustering")
    }

    pub fn discriminator(&self) -> u64 {
        self.pick(self.discriminator, "seed.discriminator")
    }

    pub fn experts(&self) -> u64 {
        self.pick(self.experts, "seed.experts")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub out_dir: PathBuf,
    pub beam_size: usize,
    /// Train in 64-bit with non-finite and frozen-set checks on every step.
    pub checked: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out_dir: PathBuf::from("run"),
            beam_size: 4,
            checked: false,
        }
    }
}

/// Value lists expanded by the sweep command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub routing_k: Vec<usize>,
    pub temperature: Vec<f64>,
    pub num_experts: Vec<usize>,
    /// Cartesian product instead of varying one axis at a time.
    pub grid: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub clustering: ClusteringSection,
    pub seeds: Seeds,
    pub run: RunSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.sweep.temperature = vec![0.1, 1.0, 10.0];
        c.clustering.anchors_per_domain = 3;
        c.seeds.experts = Some(9);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = RunConfig::from_toml("[model]\nnum_layers = 1\n[seeds]\nmaster = 4\n").unwrap();
        assert_eq!(c.model.num_layers, 1);
        assert_eq!(c.model.model_dim, ModelConfig::desk().model_dim);
        assert_eq!(c.seeds.master, 4);
    }

    #[test]
    fn derived_seeds_differ_by_stage() {
        let s = Seeds::default();
        assert_ne!(s.backbone(), s.experts());
        let t = Seeds {
            experts: Some(3),
            ..Seeds::default()
        };
        assert_eq!(t.experts(), 3);
        assert_eq!(t.backbone(), s.backbone());
    }
}
