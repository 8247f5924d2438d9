//! Experiment configuration files (TOML or JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::UnitCosts;
use crate::providers::SyntheticWorldConfig;
use crate::synth::GeneratorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_sample: usize,
    pub ks: Vec<usize>,
    /// Seeds used are `seed, seed + 1, ..., seed + seeds - 1`.
    pub seeds: usize,
    pub seed: u64,
    /// Worker threads; `None` uses rayon's default.
    pub workers: Option<usize>,
    pub selector_concurrency: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_sample: 100,
            ks: vec![5, 10, 20, 40, 100],
            seeds: 5,
            seed: 0,
            workers: None,
            selector_concurrency: crate::harness::DEFAULT_SELECTOR_CONCURRENCY,
        }
    }
}

impl EvalConfig {
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: SyntheticWorldConfig,
    pub benchmark: GeneratorConfig,
    pub eval: EvalConfig,
    pub costs: UnitCosts,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.benchmark.validate()?;
        self.costs.validate()?;
        if self.eval.k_sample == 0 || self.eval.seeds == 0 {
            return Err(Error::ConfigInvalid("k_sample and seeds must be positive".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::ConfigInvalid("ks must be a non-empty list of positive sizes".into()));
        }
        Ok(())
    }

    /// Parses `.json` as JSON and anything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[world]\nn_images = 300\nseed = 4\n\n[eval]\nseeds = 2\n").unwrap();
        let cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.world.n_images, 300);
        assert_eq!(cfg.world.n_facets, 8);
        assert_eq!(cfg.eval.seed_list(), [0, 1]);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[world]\nn_imgs = 3\n").unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Format { .. })));
        std::fs::write(&p, "[world]\nprompt_boost = 0.5\n").unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::ConfigInvalid(_))));
    }
}
