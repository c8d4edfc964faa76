//! The single JSON configuration file shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use geovid_core::bootstrap::BootstrapParams;
use geovid_core::pipeline::ModelConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Reports go to `<runs>/<timestamp>/`.
    pub runs: PathBuf,
    /// Directory holding one sub-directory per video.
    pub corpus: Option<PathBuf>,
    /// Video ids (sub-directory names) per role. Empty train and test lists
    /// split the corpus two thirds / one third in name order.
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub unlabeled: Vec<String>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            runs: PathBuf::from("runs"),
            corpus: None,
            train: Vec::new(),
            test: Vec::new(),
            unlabeled: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub windows: Vec<usize>,
    pub level_sets: Vec<Vec<f64>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            windows: vec![1, 5, 10, 25],
            level_sets: vec![vec![0.1], vec![0.2], vec![0.1, 0.2]],
        }
    }
}

/// Random synthetic corpus generated by `all` when the corpus is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub width: u32,
    pub height: u32,
    pub frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 0,
            width: 64,
            height: 64,
            frames: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub bootstrap: BootstrapParams,
    pub ablation: AblationConfig,
    pub synth: SynthConfig,
    pub seed: u64,
}

impl PipelineConfig {
    /// Reads and validates `path`, or returns the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => PipelineConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.bootstrap.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.ablation.windows.is_empty() || self.ablation.windows.contains(&0) {
            return Err(CliError::Config("ablation windows must be positive".into()));
        }
        if self.ablation.level_sets.iter().any(|s| s.is_empty() || s.iter().any(|&f| !(f > 0.0 && f <= 1.0))) {
            return Err(CliError::Config("ablation level sets must hold fractions in (0, 1]".into()));
        }
        if self.synth.width < 8 || self.synth.height < 8 || self.synth.frames < 2 {
            return Err(CliError::Config("synthetic videos need at least 8x8 pixels and 2 frames".into()));
        }
        Ok(())
    }
}

pub fn parse_fractions(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad level fraction {t:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"model": {"boost": {"round": 3}}}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"path": {}}"#).is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"model": {"boost": {"rounds": 3}}, "seed": 7}"#).unwrap();
        assert_eq!(c.model.boost.rounds, 3);
        assert_eq!(c.seed, 7);
        assert_eq!(c.bootstrap.per_class_quota, 5000);
    }

    #[test]
    fn fractions_parse() {
        assert_eq!(parse_fractions("0.1, 0.2").unwrap(), vec![0.1, 0.2]);
        assert!(parse_fractions("0.1,x").is_err());
    }
}
