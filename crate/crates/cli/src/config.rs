use std::path::{Path, PathBuf};

use pact_core::models::{ModelSpec, ResidualStackSpec};
use pact_core::train::TrainConfig;
use pact_core::BlockMode;
use serde::{Deserialize, Serialize};

/// Default number of held-out examples per evaluation.
pub const DEFAULT_EVAL_EXAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub modes: Vec<BlockMode>,
    pub examples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            modes: BlockMode::ALL.to_vec(),
            examples: DEFAULT_EVAL_EXAMPLES,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// A complete experiment description read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::Residual(ResidualStackSpec::default()),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| format!("{}: {e}", origin.display()))?;
        cfg.model.validate().map_err(|e| format!("{}: [model] {e}", origin.display()))?;
        cfg.train.validate().map_err(|e| format!("{}: [train] {e}", origin.display()))?;
        if cfg.eval.examples == 0 {
            return Err(format!("{}: [eval] examples must be positive", origin.display()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::parse(&text, path)
    }

    /// Every default spelled out, suitable for writing next to the outputs.
    pub fn resolved(&self, out_dir: &Path) -> Self {
        Self {
            train: self.train.resolved(),
            output: OutputSection {
                dir: Some(out_dir.to_path_buf()),
            },
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}
