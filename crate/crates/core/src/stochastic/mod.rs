//! Distributions, samplers and gradient estimators for discrete halting latents.

mod concrete;
mod estimator;
mod halting;
mod prior;
mod rng;
mod variance;

pub use concrete::{
    relaxed_bernoulli, relaxed_bernoulli_from_logit, relaxed_bernoulli_value, sample_bernoulli,
    sample_relaxed_bernoulli, UNIFORM_EPS,
};
pub use estimator::{reinforce_surrogate, EstimatorKind, EstimatorState, BASELINE_DECAY};
pub use halting::{
    expected_iterations, expected_iterations_value, halting_pmf, log_halting_pmf_at,
    stick_break, stick_break_values, HaltingDistribution,
};
pub use prior::TruncatedGeometricPrior;
pub use rng::{FixedUniforms, RngStream, UniformSource};
pub use variance::{log10_variance, VarianceProbe, DEFAULT_WINDOW};
