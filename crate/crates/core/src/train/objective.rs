use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::models::ForwardOutput;
use crate::mode::BlockMode;
use crate::stochastic::{reinforce_surrogate, EstimatorState};

/// Differentiable loss of one example plus the values that are logged.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    /// Quantity to differentiate; a surrogate for score-function training.
    pub loss: Var<'t>,
    /// `log p(y | x, z)` of the sampled halting times.
    pub log_likelihood: f64,
    /// `Σ_k τ N_k`.
    pub penalty: f64,
}

impl LossTerms<'_> {
    /// `-(log p - Σ τ N)`, the negated single-sample objective.
    pub fn objective(&self) -> f64 {
        self.penalty - self.log_likelihood
    }
}

fn require_mode(out: &ForwardOutput<'_>, mode: BlockMode, op: &str) -> Result<()> {
    match out.blocks.iter().find(|b| b.trace.mode != mode) {
        Some(b) => Err(Error::ModeMismatch(format!(
            "{op} needs {mode} blocks, got a {} block",
            b.trace.mode
        ))),
        None => Ok(()),
    }
}

fn likelihood_and_penalty<'t>(out: &ForwardOutput<'t>, targets: &[usize], tau: f64) -> Result<(Var<'t>, Var<'t>)> {
    Ok((out.log_likelihood(targets)?, out.penalty(tau)?))
}

/// `-log p(y | x, ẑ) + Σ_k τ N_k` for a relaxed forward pass.
pub fn loss_relaxed<'t>(out: &ForwardOutput<'t>, targets: &[usize], tau: f64) -> Result<LossTerms<'t>> {
    require_mode(out, BlockMode::Relaxed, "loss_relaxed")?;
    let (ll, penalty) = likelihood_and_penalty(out, targets, tau)?;
    Ok(LossTerms {
        loss: penalty.sub(ll)?,
        log_likelihood: ll.value()[0],
        penalty: penalty.value()[0],
    })
}

/// Score-function surrogate for a discrete forward pass.
pub fn loss_reinforce<'t>(
    out: &ForwardOutput<'t>,
    targets: &[usize],
    tau: f64,
    state: &EstimatorState,
) -> Result<LossTerms<'t>> {
    require_mode(out, BlockMode::Discrete, "loss_reinforce")?;
    let (ll, penalty) = likelihood_and_penalty(out, targets, tau)?;
    let log_q = out
        .log_q()
        .ok_or_else(|| Error::ModeMismatch("loss_reinforce needs log q of every block".into()))??;
    Ok(LossTerms {
        loss: reinforce_surrogate(ll, log_q, penalty, state)?,
        log_likelihood: ll.value()[0],
        penalty: penalty.value()[0],
    })
}

/// `-log p(y | x) + Σ_k τ ρ_k` for an ACT forward pass.
pub fn loss_act<'t>(out: &ForwardOutput<'t>, targets: &[usize], tau: f64) -> Result<LossTerms<'t>> {
    require_mode(out, BlockMode::Act, "loss_act")?;
    let (ll, penalty) = likelihood_and_penalty(out, targets, tau)?;
    Ok(LossTerms {
        loss: penalty.sub(ll)?,
        log_likelihood: ll.value()[0],
        penalty: penalty.value()[0],
    })
}
