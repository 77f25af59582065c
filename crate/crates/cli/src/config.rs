//! Run configuration: JSON file plus command-line overrides.

use charpose::data::SplitConfig;
use charpose::refine::{RefinementWeights, SolverConfig};
use charpose::train::{LossKind, TrainingConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything a run can configure. Defaults are the reference constants
/// (learning rate 0.002, warmup 4000 steps, batch 250, 10 bins, 16³ grid,
/// k = 6, refinement weights 1/1/3/0.1).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub loss: LossName,
    pub bin0_weight: f64,
    pub dropout_p: f64,
    pub k: usize,
    pub refine_weights: RefinementWeights,
    pub refine_learning_rate: f64,
    pub refine_iterations: usize,
    pub use_action_node: bool,
    pub action_vocab_size: usize,
    pub eval_every: usize,
    pub patience: Option<usize>,
    pub stop_below_val_error: Option<f64>,
    pub eval_k: usize,
    pub split: Option<SplitConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LossName {
    CrossEntropy,
    L1,
    L2,
    Deterministic,
}

impl From<LossName> for LossKind {
    fn from(l: LossName) -> LossKind {
        match l {
            LossName::CrossEntropy => LossKind::CrossEntropy,
            LossName::L1 => LossKind::L1,
            LossName::L2 => LossKind::L2,
            LossName::Deterministic => LossKind::DeterministicL2,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            embed_dim: 64,
            learning_rate: 0.002,
            warmup_steps: 4000,
            batch_size: 250,
            max_steps: 20_000,
            loss: LossName::CrossEntropy,
            bin0_weight: 0.1,
            dropout_p: 0.0,
            k: 6,
            refine_weights: RefinementWeights::default(),
            refine_learning_rate: 0.01,
            refine_iterations: 500,
            use_action_node: false,
            action_vocab_size: 29,
            eval_every: 0,
            patience: None,
            stop_below_val_error: None,
            eval_k: 6,
            split: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        Ok(config)
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            loss_kind: self.loss.into(),
            bin0_weight: self.bin0_weight,
            seed: self.seed,
            eval_every: self.eval_every,
            patience: self.patience,
            stop_below_val_error: self.stop_below_val_error,
            eval_k: self.eval_k,
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            learning_rate: self.refine_learning_rate,
            iterations: self.refine_iterations,
        }
    }
}
