//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headcache::RoleCounts;
use crate::model::{InputSchedule, ModelConfig};
use crate::profiler::{role_counts, StabilityAxis};
use crate::rollout::{MemoryParams, PromptSchedule};
use crate::rope::RopeParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StrategyConfig {
    Unbounded,
    UniformWindow {
        #[serde(rename = "W")]
        window: usize,
    },
    SinkWindow {
        #[serde(rename = "W")]
        window: usize,
        n_sink: usize,
    },
    HeadWise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub alpha_anchor: f64,
    pub tau_local: f64,
    #[serde(flatten)]
    pub memory: MemoryParams,
    /// Defaults to the standard split of the head dimension.
    pub rope: Option<RopeParams>,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            alpha_anchor: 0.25,
            tau_local: 0.20,
            memory: MemoryParams::default(),
            rope: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    /// Profiling prompts; the prompt schedule's prompts when empty.
    pub prompts: Vec<String>,
    /// Explicit block indices; otherwise `samples` blocks are drawn from
    /// `3..=blocks` with the model seed.
    pub sampled_blocks: Option<Vec<usize>>,
    pub blocks: usize,
    pub samples: usize,
    pub repeats: usize,
    /// Profiling window in frames, current block included.
    pub window: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            prompts: vec![
                "a red car driving along a coastal road".into(),
                "a cat sleeping on a windowsill".into(),
                "waves breaking over black rocks at dusk".into(),
                "a crowded market street in the rain".into(),
            ],
            sampled_blocks: None,
            blocks: 12,
            samples: 4,
            repeats: 2,
            window: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityMode {
    /// Conditions vary along `axis`.
    Varied,
    /// The same condition repeated `runs` times.
    Identical,
    /// Synthetic reports with pairwise disjoint anchor sets.
    DisjointAnchors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityConfig {
    pub runs: usize,
    pub axis: StabilityAxis,
    pub mode: StabilityMode,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            runs: 4,
            axis: StabilityAxis::Prompts,
            mode: StabilityMode::Varied,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    /// Uniform-window baselines, frames per head.
    pub baselines: Vec<usize>,
    /// Explicit role counts; otherwise taken from the role map, or from the
    /// thresholds applied to the model's head count.
    pub counts: Option<RoleCounts>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            baselines: vec![21, 16, 8, 12],
            counts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub head_role_map: Option<PathBuf>,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
    pub prompt_schedule: PromptSchedule,
    #[serde(rename = "N_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub inputs: InputSchedule,
    #[serde(default)]
    pub profile: ProfileConfig,
    #[serde(default)]
    pub stability: StabilityConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; a relative role-map path resolves against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(map), Some(dir)) = (&cfg.head_role_map, path.parent()) {
            if map.is_relative() {
                cfg.head_role_map = Some(dir.join(map));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let h = &self.hyperparameters;
        role_counts(self.model.head_count(), h.alpha_anchor, h.tau_local)?;
        h.memory.validate()?;
        if let Some(r) = &h.rope {
            r.validate(self.model.head_dim)?;
        }
        self.prompt_schedule.validate()?;
        if self.n_blocks == 0 {
            return Err(Error::Config("N_blocks must be at least 1".into()));
        }
        match self.strategy {
            StrategyConfig::UniformWindow { window } | StrategyConfig::SinkWindow { window, .. }
                if window < self.model.frames_per_block =>
            {
                Err(Error::Config(format!(
                    "window {window} is smaller than a block of {} frames",
                    self.model.frames_per_block
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn rope(&self) -> RopeParams {
        self.hyperparameters
            .rope
            .unwrap_or_else(|| RopeParams::for_head_dim(self.model.head_dim))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "strategy": {"type": "uniform_window", "W": 4},
        "prompt_schedule": [{"prompt": "a cat", "start_block": 1}],
        "N_blocks": 8
    }"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.strategy, StrategyConfig::UniformWindow { window: 4 });
        assert_eq!(c.hyperparameters.memory.b_epi, 5);
        assert_eq!(c.hyperparameters.memory.b_fast, 3);
        assert_eq!(c.hyperparameters.memory.tau_novel, 0.95);
        assert_eq!(c.hyperparameters.memory.update_interval, 3);
        assert_eq!(c.model.frames_per_block, 3);
    }

    #[test]
    fn hyperparameter_keys() {
        let text = MINIMAL.replace(
            r#""N_blocks": 8"#,
            r#""N_blocks": 8, "hyperparameters": {"alpha_anchor": 0.3, "B_epi": 7, "tau_novel": 0.9}"#,
        );
        let c = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(c.hyperparameters.alpha_anchor, 0.3);
        assert_eq!(c.hyperparameters.tau_local, 0.2);
        assert_eq!(c.hyperparameters.memory.b_epi, 7);
        assert_eq!(c.hyperparameters.memory.tau_novel, 0.9);
    }

    #[test]
    fn invalid_thresholds_are_config_errors() {
        let text = MINIMAL.replace(
            r#""N_blocks": 8"#,
            r#""N_blocks": 8, "hyperparameters": {"alpha_anchor": 0.7, "tau_local": 0.5}"#,
        );
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_must_start_at_one() {
        let text = MINIMAL.replace(r#""start_block": 1"#, r#""start_block": 2"#);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace(r#""N_blocks": 8"#, r#""N_blocks": 8, "n_blocks": 9"#);
        assert!(ExperimentConfig::from_json(&text).is_err());
    }
}
