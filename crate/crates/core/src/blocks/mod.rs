//! Adaptive computation block executors.
//!
//! A block repeatedly applies an iteration body to its input and decides,
//! through per-iteration halting heads, when to stop. Four execution modes are
//! provided: discrete sampling, deterministic thresholding, the Concrete
//! relaxation and the ACT baseline. Vector-valued blocks (one latent per block)
//! live in [`run_block`] and friends; per-position blocks over feature maps
//! live in [`spatial`].

mod ponder;
pub mod spatial;
mod vector;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::mode::BlockMode;
use crate::stochastic::HaltingDistribution;

pub use ponder::{act_weights, ponder_demo, write_ponder_csv, ActOutcome, DEFAULT_PONDER_POINTS, DEFAULT_PONDER_TAIL};
pub use vector::{run_act, run_block, run_discrete, run_relaxed, run_thresholded, IterationBody};

/// Initial bias of every halting logit, so fresh heads start with `h = σ(-3)`.
pub const HALTING_BIAS_INIT: f64 = -3.0;
pub const DEFAULT_TEMPERATURE: f64 = 2.0 / 3.0;
pub const DEFAULT_CLIP: f64 = 0.01;
pub const DEFAULT_ACT_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Maximum number of iterations `L`.
    pub max_iterations: usize,
    pub mode: BlockMode,
    /// Concrete temperature `λ` (relaxed mode).
    pub temperature: f64,
    /// Remaining-stick threshold `δ` below which relaxed execution stops.
    pub clip: f64,
    /// ACT halting slack `ε`.
    pub act_epsilon: f64,
    /// Computation time penalty `τ`.
    pub penalty: f64,
}

impl BlockConfig {
    pub fn new(max_iterations: usize, mode: BlockMode) -> Self {
        Self {
            max_iterations,
            mode,
            temperature: DEFAULT_TEMPERATURE,
            clip: DEFAULT_CLIP,
            act_epsilon: DEFAULT_ACT_EPSILON,
            penalty: 0.0,
        }
    }

    pub fn with_mode(mut self, mode: BlockMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        if !(0.0..1.0).contains(&self.clip) {
            return bad(format!("clip threshold {} outside [0, 1)", self.clip));
        }
        if !(self.act_epsilon > 0.0 && self.act_epsilon < 1.0) {
            return bad(format!("act epsilon {} outside (0, 1)", self.act_epsilon));
        }
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return bad(format!("penalty {} must be a finite non-negative number", self.penalty));
        }
        Ok(())
    }
}

/// Halting head for one iteration, bound to parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub enum HaltingHead<'t> {
    /// `w · u + b` for a feature vector `u` of width `D`; `w: [1, D]`, `b: [1]`.
    Vector { weight: Var<'t>, bias: Var<'t> },
    /// `W̃ ∗ u + W · pool(u) + b` for a `[C, H, W]` map, giving an `[H, W]` logit map.
    ///
    /// `kernel: [1, C, 3, 3]`, `pool_weight: [1, C]`, `bias: [1]`.
    Grid {
        kernel: Var<'t>,
        pool_weight: Var<'t>,
        bias: Var<'t>,
    },
}

impl<'t> HaltingHead<'t> {
    /// Halting logit; `h = σ(logit)`.
    pub fn logit(&self, u: Var<'t>) -> Result<Var<'t>> {
        match *self {
            HaltingHead::Vector { weight, bias } => weight.matmul(u)?.add(bias),
            HaltingHead::Grid {
                kernel,
                pool_weight,
                bias,
            } => {
                let shape = u.shape();
                let local = u.conv3x3(kernel, 1)?.reshape(&shape[1..])?;
                let global = pool_weight.matmul(u.global_avg_pool()?)?.add(bias)?;
                local.add_scalar(global)
            }
        }
    }

    /// Multiply-accumulates charged per evaluated position (whole vector for `Vector`).
    pub fn macs_per_position(&self) -> u64 {
        match self {
            HaltingHead::Vector { weight, .. } => weight.numel() as u64,
            // 3x3 mixing plus this position's share of the pooled projection
            HaltingHead::Grid { pool_weight, .. } => 10 * pool_weight.numel() as u64,
        }
    }
}

/// Per-position multiplier from the gates applied so far.
///
/// `r = Π_t (1 - g^t)` and `a = r · [r > δ]`. For binary gates this is the
/// discrete mask `Π (1 - ξ^t)`; for relaxed gates it is `â` and is either 0 or
/// in `(δ, 1]`. With no gates yet every position is active.
pub fn active_mask(gates: &[Vec<f64>], positions: usize, clip: f64) -> Result<Vec<f64>> {
    let mut r = vec![1.0; positions];
    for g in gates {
        if g.len() != positions {
            return Err(Error::ShapeMismatch {
                op: "active_mask",
                left: vec![positions],
                right: vec![g.len()],
            });
        }
        for (ri, &gi) in r.iter_mut().zip(g) {
            if !(0.0..=1.0).contains(&gi) {
                return Err(Error::InvalidProbability(gi));
            }
            *ri *= 1.0 - gi;
        }
    }
    Ok(r.into_iter().map(|ri| if ri > clip { ri } else { 0.0 }).collect())
}

/// What one block execution did.
#[derive(Debug, Clone, PartialEq)]
pub struct HaltingTrace {
    pub mode: BlockMode,
    /// One halting distribution per latent variable (per group for spatial blocks).
    pub latents: Vec<HaltingDistribution>,
    /// Body invocations performed by the block loop.
    pub executed: usize,
    /// Mean over latents of the iterations each latent actually ran.
    pub realized_iterations: f64,
    /// Multiply-accumulates charged for bodies and heads.
    pub flops: u64,
    /// Mean ACT ponder cost `ρ = N + R` (ACT mode only).
    pub ponder: Option<f64>,
}

impl HaltingTrace {
    /// Mean over latents of the analytic expected iteration count.
    pub fn expected_iterations(&self) -> f64 {
        mean(self.latents.iter().map(|d| d.expected_iterations))
    }

    /// Iterations reported for evaluation: the realized count for discrete,
    /// thresholded and ACT blocks, the analytic `N` for relaxed blocks.
    pub fn reported_iterations(&self) -> f64 {
        match self.mode {
            BlockMode::Relaxed => self.expected_iterations(),
            _ => self.realized_iterations,
        }
    }

    /// Halting probabilities of the first latent.
    pub fn halting(&self) -> &[f64] {
        &self.latents[0].halting
    }

    /// Halting weights of the first latent.
    pub fn weights(&self) -> &[f64] {
        &self.latents[0].weights
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Differentiable results of a block execution.
#[derive(Debug, Clone)]
pub struct BlockOutput<'t> {
    pub output: Var<'t>,
    /// Mean over latents of `N`, differentiable in the halting heads.
    pub expected_iterations: Var<'t>,
    /// `log q(z)` summed over latents (discrete mode only).
    pub log_q: Option<Var<'t>>,
    /// Mean over latents of `ρ = N + R` (ACT mode only).
    pub ponder: Option<Var<'t>>,
    pub trace: HaltingTrace,
}

impl<'t> BlockOutput<'t> {
    /// Quantity the computation-time penalty multiplies: `ρ` for ACT, `N` otherwise.
    pub fn penalized_iterations(&self) -> Var<'t> {
        self.ponder.unwrap_or(self.expected_iterations)
    }
}
