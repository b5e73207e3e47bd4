//! Bernoulli gates and their Concrete (RelaxedBernoulli) relaxation.

use super::RngStream;
use crate::autodiff::{Var, PROB_EPS};
use crate::error::{Error, Result};

/// Uniform noise is clamped to `(UNIFORM_EPS, 1 - UNIFORM_EPS)` before its logit.
pub const UNIFORM_EPS: f64 = 1e-12;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(temperature))
    }
}

/// Returns `true` with probability `h`.
pub fn sample_bernoulli(h: f64, rng: &mut RngStream) -> Result<bool> {
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::InvalidProbability(h));
    }
    Ok(rng.uniform() < h)
}

/// Scalar relaxed sample `sigmoid((logit(h) + logit(eps)) / temperature)`.
pub fn relaxed_bernoulli_value(h: f64, temperature: f64, eps: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::InvalidProbability(h));
    }
    let h = h.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let eps = eps.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    let l = (logit(h) + logit(eps)) / temperature;
    Ok(1.0 / (1.0 + (-l).exp()))
}

/// Elementwise relaxed gates from halting logits and explicit uniform noise.
///
/// Differentiable with respect to `logits`; `noise` holds one uniform per element.
pub fn relaxed_bernoulli_from_logit<'t>(
    logits: Var<'t>,
    temperature: f64,
    noise: &[f64],
) -> Result<Var<'t>> {
    check_temperature(temperature)?;
    let shape = logits.shape();
    if noise.len() != logits.numel() {
        return Err(Error::ShapeMismatch {
            op: "relaxed_bernoulli",
            left: shape,
            right: vec![noise.len()],
        });
    }
    let noise_logits: Vec<f64> = noise
        .iter()
        .map(|&e| logit(e.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)))
        .collect();
    let noise = logits.tape().constant(noise_logits, &shape)?;
    Ok(logits.add(noise)?.affine(1.0 / temperature, 0.0).sigmoid())
}

/// Relaxed gates from halting probabilities (clamped before the logit).
pub fn relaxed_bernoulli<'t>(h: Var<'t>, temperature: f64, noise: &[f64]) -> Result<Var<'t>> {
    relaxed_bernoulli_from_logit(h.logit(), temperature, noise)
}

/// Draws fresh noise from `rng` for every element of `h`.
pub fn sample_relaxed_bernoulli<'t>(
    h: Var<'t>,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<Var<'t>> {
    check_temperature(temperature)?;
    let noise: Vec<f64> = (0..h.numel()).map(|_| rng.open_uniform()).collect();
    relaxed_bernoulli(h, temperature, &noise)
}
