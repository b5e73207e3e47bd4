//! Objectives, optimizers and the training, evaluation and benchmark loops.

mod bench;
mod eval;
mod metrics;
mod objective;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::blocks::{DEFAULT_ACT_EPSILON, DEFAULT_CLIP, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::models::RunConfig;
use crate::mode::BlockMode;
use crate::stochastic::{EstimatorKind, DEFAULT_WINDOW};

pub use bench::{spearman, sweep_tau, variance_bench, write_sweep_csv, write_variance_csv, SweepRow, VarianceRow};
pub use eval::{evaluate, test_set, write_eval_csv, EvalRow};
pub use metrics::{metrics_header, MetricsRow, MetricsWriter};
pub use objective::{loss_act, loss_reinforce, loss_relaxed, LossTerms};
pub use optim::{
    LrSchedule, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, DEFAULT_MOMENTUM, LR_DECAY_FACTOR,
    LR_MILESTONES,
};
pub use trainer::{train, TrainOutcome};

/// Default Adam learning rate for score-function training.
pub const ADAM_LEARNING_RATE: f64 = 1e-3;
/// Default SGD-momentum learning rate.
pub const SGD_LEARNING_RATE: f64 = 0.02;

/// RNG stream ids; the seed selects the run, the stream the consumer.
pub(crate) mod streams {
    pub const DATA: u64 = 0x10;
    pub const NOISE: u64 = 0x20;
    pub const TEST: u64 = 0x30;
    pub const EVAL_NOISE: u64 = 0x40;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Block mode during training: relaxed (Concrete), discrete (REINFORCE) or act.
    pub mode: BlockMode,
    /// Defaults to Adam for discrete training and SGD with momentum otherwise.
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub tau: f64,
    pub temperature: f64,
    pub clip: f64,
    pub act_epsilon: f64,
    pub grouping: usize,
    pub seed: u64,
    pub log_every: usize,
    pub variance_window: usize,
    /// Fill the `wall_ms` column; breaks byte-identical reruns.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: BlockMode::Relaxed,
            optimizer: None,
            learning_rate: None,
            weight_decay: 0.0,
            batch_size: 16,
            steps: 1000,
            tau: 0.01,
            temperature: DEFAULT_TEMPERATURE,
            clip: DEFAULT_CLIP,
            act_epsilon: DEFAULT_ACT_EPSILON,
            grouping: 1,
            seed: 0,
            log_every: 50,
            variance_window: DEFAULT_WINDOW,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// Estimator used by `mode`; `None` for ACT, whose loss is deterministic.
    pub fn estimator(&self) -> Option<EstimatorKind> {
        match self.mode {
            BlockMode::Discrete => Some(EstimatorKind::Reinforce),
            BlockMode::Relaxed => Some(EstimatorKind::Concrete),
            _ => None,
        }
    }

    /// Config for `estimator` with its default optimizer and learning rate.
    pub fn for_estimator(&self, estimator: EstimatorKind) -> Self {
        let mode = match estimator {
            EstimatorKind::Reinforce => BlockMode::Discrete,
            EstimatorKind::Concrete => BlockMode::Relaxed,
        };
        Self {
            mode,
            optimizer: None,
            learning_rate: None,
            ..self.clone()
        }
        .resolved()
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(match self.mode {
            BlockMode::Discrete => OptimizerKind::Adam,
            _ => OptimizerKind::SgdMomentum,
        })
    }

    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.optimizer_kind() {
            OptimizerKind::Adam => ADAM_LEARNING_RATE,
            OptimizerKind::SgdMomentum => SGD_LEARNING_RATE,
        })
    }

    /// The same config with every default made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            optimizer: Some(self.optimizer_kind()),
            learning_rate: Some(self.lr()),
            ..self.clone()
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            mode: self.mode,
            temperature: self.temperature,
            clip: self.clip,
            act_epsilon: self.act_epsilon,
            penalty: self.tau,
            grouping: self.grouping,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == BlockMode::Thresholded {
            return Err(Error::InvalidConfig(
                "thresholded blocks have no gradient for the halting heads; train in relaxed, discrete or act mode".into(),
            ));
        }
        if self.batch_size == 0 || self.steps == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("batch_size, steps and log_every must be positive".into()));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be finite and >= 0, got {}", self.tau)));
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive and weight decay >= 0".into()));
        }
        if self.variance_window < 2 {
            return Err(Error::InvalidConfig("variance_window must be at least 2".into()));
        }
        self.run_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_estimator() {
        let base = TrainConfig::default();
        let r = base.for_estimator(EstimatorKind::Reinforce);
        assert_eq!(r.optimizer, Some(OptimizerKind::Adam));
        assert_eq!(r.learning_rate, Some(1e-3));
        let c = base.for_estimator(EstimatorKind::Concrete);
        assert_eq!(c.optimizer, Some(OptimizerKind::SgdMomentum));
        assert_eq!(c.mode, BlockMode::Relaxed);
    }

    #[test]
    fn thresholded_training_rejected() {
        let cfg = TrainConfig {
            mode: BlockMode::Thresholded,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
