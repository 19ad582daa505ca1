//! TOML pipeline configuration: one block per stage, flags override file
//! values. Defaults follow the standard hyperparameters (initial size 7000,
//! cap 60000, step 1000, threshold 5.0; static dim 300 over 3 epochs; beta
//! 1.0; mask probability 0.15; K = 10 parallel sentences).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unibridge_core::fusion::Pooling;
use unibridge_core::{SearchConfig, StaticTrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsBlock,
    pub search: SearchBlock,
    pub static_embed: StaticBlock,
    pub init: InitBlock,
    pub objective: ObjectiveBlock,
    pub fusion: FusionBlock,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsBlock {
    pub corpus: Option<PathBuf>,
    pub parallel: Option<PathBuf>,
    pub target_tokenizer: Option<PathBuf>,
    pub source_tokenizer: Option<PathBuf>,
    pub source_embedding: Option<PathBuf>,
    pub target_static: Option<PathBuf>,
    pub source_static: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchBlock {
    pub initial_size: usize,
    pub max_size: usize,
    pub step: usize,
    pub stop_threshold: f64,
    /// Score with recounted corpus frequencies instead of EM estimates.
    pub recounted_probs: bool,
}

impl Default for SearchBlock {
    fn default() -> Self {
        let base = SearchConfig::default();
        Self {
            initial_size: base.initial_size,
            max_size: base.max_size,
            step: base.step,
            stop_threshold: base.stop_threshold,
            recounted_probs: false,
        }
    }
}

impl SearchBlock {
    pub fn to_search_config(&self) -> SearchConfig {
        SearchConfig {
            initial_size: self.initial_size,
            max_size: self.max_size,
            step: self.step,
            stop_threshold: self.stop_threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticBlock {
    pub dim: usize,
    pub epochs: usize,
    pub window: usize,
    pub negatives: usize,
    pub min_count: u64,
    pub subsample_threshold: f64,
}

impl Default for StaticBlock {
    fn default() -> Self {
        let base = StaticTrainConfig::default();
        Self {
            dim: base.dim,
            epochs: base.epochs,
            window: base.window,
            negatives: base.negatives,
            min_count: base.min_count,
            subsample_threshold: base.subsample_threshold,
        }
    }
}

impl StaticBlock {
    pub fn to_train_config(&self) -> StaticTrainConfig {
        StaticTrainConfig {
            dim: self.dim,
            epochs: self.epochs,
            window: self.window,
            negatives: self.negatives,
            min_count: self.min_count,
            subsample_threshold: self.subsample_threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitBlock {
    pub block_size: usize,
}

impl Default for InitBlock {
    fn default() -> Self {
        Self { block_size: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveBlock {
    pub beta: f64,
    pub mask_prob: f64,
}

impl Default for ObjectiveBlock {
    fn default() -> Self {
        Self {
            beta: 1.0,
            mask_prob: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionBlock {
    pub pooling: Pooling,
    pub k: usize,
}

impl Default for FusionBlock {
    fn default() -> Self {
        Self {
            pooling: Pooling::Mean,
            k: 10,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::validation("config", format!("cannot read {}: {e}", path.display()))
        })?;
        toml::from_str(&text).map_err(|e| {
            CliError::validation("config", format!("{}: {e}", path.display()))
        })
    }

    pub fn load_or_default(path: Option<&PathBuf>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}

/// Resolve a required path from flag or config, checking existence.
pub fn require_path(
    stage: &'static str,
    field: &str,
    flag: Option<&PathBuf>,
    from_config: Option<&PathBuf>,
) -> Result<PathBuf, CliError> {
    let path = flag.or(from_config).ok_or_else(|| {
        CliError::validation(stage, format!("missing required path: {field}"))
    })?;
    if !path.exists() {
        return Err(CliError::validation(
            stage,
            format!("{field} does not exist: {}", path.display()),
        ));
    }
    Ok(path.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_standard_hyperparameters() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.search.initial_size, 7000);
        assert_eq!(cfg.search.max_size, 60000);
        assert_eq!(cfg.search.step, 1000);
        assert_eq!(cfg.search.stop_threshold, 5.0);
        assert_eq!(cfg.static_embed.dim, 300);
        assert_eq!(cfg.static_embed.epochs, 3);
        assert_eq!(cfg.objective.beta, 1.0);
        assert_eq!(cfg.objective.mask_prob, 0.15);
        assert_eq!(cfg.fusion.k, 10);
    }

    #[test]
    fn partial_toml_fills_in_defaults() {
        let cfg: PipelineConfig =
            toml::from_str("seed = 9\n[search]\nstop_threshold = 10.0\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.search.stop_threshold, 10.0);
        assert_eq!(cfg.search.initial_size, 7000);
        assert_eq!(cfg.objective.beta, 1.0);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let out: Result<PipelineConfig, _> = toml::from_str("[search]\nnot_a_field = 1\n");
        assert!(out.is_err());
    }
}
