//! Experiment configuration: one TOML file per experiment, validated in full
//! before any work starts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use visplan_core::corpus::CorpusSpec;
use visplan_core::gridworld::size_range;
use visplan_core::parse::ParseConfig;
use visplan_core::policy::optim::OptimConfig;
use visplan_core::policy::ModelConfig;
use visplan_core::reward::RewardConfig;
use visplan_core::train::{GrpoConfig, Judge, RegimeConfig, SupervisedConfig};
use visplan_core::{TaskKind, TileAtlas};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub tile_px: usize,
    pub wall_thickness: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_px: 16,
            wall_thickness: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Also evaluate on the larger out-of-distribution grid.
    #[serde(default)]
    pub ood: bool,
    /// Number of rollouts written as image strips.
    #[serde(default)]
    pub dump_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Run directory name under the output root.
    pub name: String,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub rl_optim: OptimConfig,
    pub supervised: SupervisedConfig,
    pub stage1: SupervisedConfig,
    pub grpo: GrpoConfig,
    pub parse: ParseConfig,
    pub reward: RewardConfig,
    pub render: RenderConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    /// Desk-scale 3x3 FrozenLake defaults.
    pub fn desk(name: &str, seed: u64) -> ExperimentConfig {
        let r = RegimeConfig::default();
        let mut cfg = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            name: name.into(),
            corpus: CorpusSpec {
                task: TaskKind::FrozenLake,
                sizes: vec![3],
                n_per_size: 1250,
                test_fraction: 0.2,
                stage1_budget: 4000,
                stage1_depth_cap: 8,
                ood: false,
                seed,
            },
            model: r.model,
            optim: r.optim,
            rl_optim: r.rl_optim,
            supervised: r.supervised,
            stage1: r.stage1,
            grpo: r.grpo,
            parse: r.judge.parse,
            reward: r.judge.reward,
            render: RenderConfig::default(),
            eval: EvalConfig {
                ood: false,
                dump_images: 0,
            },
        };
        // a sample of the Stage 2 prefixes per epoch keeps a run within minutes
        cfg.grpo.prefixes_per_epoch = Some(400);
        cfg.reseed(seed);
        cfg
    }

    /// Point every seed of the experiment at streams derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.model.seed = seed;
        self.supervised.seed = seed.wrapping_add(1);
        self.stage1.seed = seed.wrapping_add(2);
        self.grpo.seed = seed.wrapping_add(3);
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad("name must be a plain directory name".into());
        }
        let c = &self.corpus;
        let (lo, hi) = size_range(c.task);
        if c.sizes.is_empty() || c.sizes.iter().any(|&s| s < lo || s > hi) {
            return bad(format!("corpus.sizes must lie in {lo}..={hi} for {}", c.task));
        }
        if c.n_per_size == 0 || !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
            return bad("corpus.n_per_size must be positive and test_fraction in (0, 1)".into());
        }
        if c.stage1_budget == 0 || c.stage1_depth_cap == 0 {
            return bad("corpus.stage1_budget and stage1_depth_cap must be positive".into());
        }
        let max_side = c.sizes.iter().copied().max().unwrap_or(0);
        let max_side = if c.ood || self.eval.ood {
            max_side.max(visplan_core::corpus::ood_size(c.task))
        } else {
            max_side
        };
        if max_side > self.model.max_size {
            return bad(format!("model.max_size {} is below the largest grid {max_side}", self.model.max_size));
        }
        self.model.validate().map_err(ConfigError::Invalid)?;
        self.optim.validate().map_err(|e| ConfigError::Invalid(format!("optim: {e}")))?;
        self.rl_optim.validate().map_err(|e| ConfigError::Invalid(format!("rl_optim: {e}")))?;
        for (name, s) in [("supervised", &self.supervised), ("stage1", &self.stage1)] {
            if s.batch_size == 0 {
                return bad(format!("{name}.batch_size must be positive"));
            }
        }
        self.grpo.validate().map_err(|e| ConfigError::Invalid(format!("grpo: {e}")))?;
        self.parse.validate().map_err(|e| ConfigError::Invalid(format!("parse: {e}")))?;
        self.reward.validate().map_err(|e| ConfigError::Invalid(format!("reward: {e}")))?;
        let r = &self.render;
        if r.tile_px < 8 || r.wall_thickness == 0 || r.wall_thickness * 4 > r.tile_px {
            return bad("render.tile_px must be at least 8 and wall_thickness in 1..=tile_px/4".into());
        }
        if self.eval.ood && !c.ood {
            return bad("eval.ood needs corpus.ood = true".into());
        }
        Ok(())
    }

    pub fn judge(&self) -> Judge {
        Judge {
            atlas: TileAtlas::new(self.render.tile_px, self.render.wall_thickness),
            parse: self.parse,
            reward: self.reward,
        }
    }

    pub fn regime(&self) -> RegimeConfig {
        RegimeConfig {
            model: self.model,
            optim: self.optim,
            rl_optim: self.rl_optim,
            supervised: self.supervised,
            stage1: self.stage1,
            grpo: self.grpo,
            judge: self.judge(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_round_trips() {
        let cfg = ExperimentConfig::desk("fl3", 7);
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let text = ExperimentConfig::desk("fl3", 0).to_toml();
        let extra = format!("bogus = 1\n{text}");
        assert!(matches!(ExperimentConfig::from_toml(&extra), Err(ConfigError::Parse(_))));
        let mut cfg = ExperimentConfig::desk("fl3", 0);
        cfg.grpo.epsilon = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk("fl3", 0);
        cfg.schema_version = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk("fl3", 0);
        cfg.corpus.sizes = vec![2];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk("../x", 0);
        cfg.name = "../x".into();
        assert!(cfg.validate().is_err());
    }
}
