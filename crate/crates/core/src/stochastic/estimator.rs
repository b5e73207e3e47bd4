use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::Result;

/// Moving-average decay of the score-function baseline.
pub const BASELINE_DECAY: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Score-function gradients through discrete blocks.
    Reinforce,
    /// Reparameterized gradients through relaxed blocks.
    Concrete,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::Concrete => "concrete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub kind: EstimatorKind,
    /// Scalar baseline `c`; starts at zero.
    pub baseline: f64,
    pub decay: f64,
    pub temperature: f64,
}

impl EstimatorState {
    pub fn new(kind: EstimatorKind, temperature: f64) -> Self {
        Self {
            kind,
            baseline: 0.0,
            decay: BASELINE_DECAY,
            temperature,
        }
    }

    /// `c <- decay * c + (1 - decay) * reward`, applied after the gradient step.
    pub fn update_baseline(&mut self, reward: f64) {
        self.baseline = self.decay * self.baseline + (1.0 - self.decay) * reward;
    }
}

/// Loss whose gradient is a single-sample estimate of `-grad L`:
///
/// `-log p - (sg(log p) - c) * log q + sum_k tau_k N_k`
///
/// `log_q` is the log-probability of the sampled halting times and `penalty`
/// the analytic `sum_k tau_k N_k`. The penalty is kept out of the score-function
/// reward, so its dependence on earlier latents is not differentiated.
pub fn reinforce_surrogate<'t>(
    log_likelihood: Var<'t>,
    log_q: Var<'t>,
    penalty: Var<'t>,
    state: &EstimatorState,
) -> Result<Var<'t>> {
    let advantage = log_likelihood.stop_gradient().affine(1.0, -state.baseline);
    let score = log_q.mul(advantage)?;
    log_likelihood.add(score)?.neg().add(penalty)
}
