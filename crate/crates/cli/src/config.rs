//! Run configuration shared by all subcommands, read from TOML or JSON.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use stylefit::evaluation::EvalOptions;
use stylefit::synthgen::GenConfig;
use stylefit::training::TrainConfig;

/// Every section is optional; missing fields take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub generation: GenerationDefaults,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationDefaults {
    pub beam: usize,
    pub top_k: usize,
}

impl Default for GenerationDefaults {
    fn default() -> Self {
        Self { beam: 10, top_k: 5 }
    }
}

impl RunConfig {
    /// `.json` files are parsed as JSON, anything else as TOML.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let c: RunConfig = toml::from_str("[train.stage1]\nepochs = 3\n[gen]\nm_styles = 5\n").unwrap();
        assert_eq!(c.train.stage1.epochs, 3);
        assert_eq!(c.train.stage1.batch, 128);
        assert_eq!(c.gen.m_styles, 5);
        assert_eq!(c.generation.beam, 10);
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nbogus = 1\n").is_err());
    }
}
