//! Run configuration: JSON file, flag overrides and the resolved echo.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use oceanmae::data::GenerateConfig;
use oceanmae::downstream::UNetConfig;
use oceanmae::finetune::FinetuneConfig;
use oceanmae::model::ModelConfig;
use oceanmae::pretrain::PretrainConfig;
use oceanmae::strategies::StrategyConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory read by `pretrain`, `finetune`, `evaluate` and
    /// `embed`.
    pub dataset: Option<PathBuf>,
    /// Generator settings for `gen-data`.
    pub generate: GenerateConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Downstream checkpoint directory.
    pub checkpoint: Option<PathBuf>,
    /// Write per-sample predictions as a dataset directory.
    pub dump_predictions: bool,
}

/// Every section of a run. Unknown keys are rejected at every level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, overrides the seed of every section.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub unet: UNetConfig,
    pub finetune: FinetuneConfig,
    pub strategy: StrategyConfig,
    pub evaluate: EvaluateSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Propagates the global seed into the sections.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.data.generate.seed = seed;
            self.pretrain.seed = seed;
            self.finetune.seed = seed;
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .context("no output directory: pass --out or set `out_dir`")
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.data
            .dataset
            .as_deref()
            .context("no dataset: pass --data or set `data.dataset`")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Writes the resolved configuration into the output directory and
    /// echoes it on stdout.
    pub fn echo(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let text = self.to_json();
        std::fs::write(out.join(RESOLVED_CONFIG), &text)
            .with_context(|| format!("writing {}", out.join(RESOLVED_CONFIG).display()))?;
        print!("{text}");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"model": {"embed_dims": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("embed_dims"), "{err}");
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig {
            seed: Some(4),
            ..Default::default()
        };
        cfg.apply_seed();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.pretrain.seed, 4);
    }
}
