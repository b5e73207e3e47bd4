use serde::{Deserialize, Serialize};

use super::halting::{expected_iterations, expected_iterations_value, halting_pmf};
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Geometric prior over `1..=L` iterations with log-linear penalty `tau` per iteration:
/// `p(z) = (e^tau - 1) / (1 - e^{-tau L}) * e^{-tau z}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGeometricPrior {
    penalty: f64,
    support: usize,
    log_normalizer: f64,
}

impl TruncatedGeometricPrior {
    pub fn new(penalty: f64, support: usize) -> Result<Self> {
        if !(penalty > 0.0 && penalty.is_finite()) {
            return Err(Error::InvalidConfig(format!("prior penalty must be positive, got {penalty}")));
        }
        if support == 0 {
            return Err(Error::InvalidConfig("prior support must be at least 1".into()));
        }
        // log((e^tau - 1) / (1 - e^{-tau L})) via expm1 for small tau
        let log_normalizer = penalty.exp_m1().ln() - (-(-penalty * support as f64).exp_m1()).ln();
        Ok(Self {
            penalty,
            support,
            log_normalizer,
        })
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn support(&self) -> usize {
        self.support
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn log_pmf(&self, z: usize) -> Result<f64> {
        if z == 0 || z > self.support {
            return Err(Error::OutOfSupport {
                value: z,
                max: self.support,
            });
        }
        Ok(self.log_normalizer - self.penalty * z as f64)
    }

    pub fn pmf(&self) -> Vec<f64> {
        (1..=self.support)
            .map(|z| (self.log_normalizer - self.penalty * z as f64).exp())
            .collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.support {
            return Err(Error::ShapeMismatch {
                op: "expected_log_prior",
                left: vec![self.support],
                right: vec![len],
            });
        }
        Ok(())
    }

    /// `E_q log p(z) = log_normalizer - tau * N(h)`.
    pub fn expected_log_prior_value(&self, h: &[f64]) -> Result<f64> {
        self.check_len(h.len())?;
        halting_pmf(h)?;
        Ok(self.log_normalizer - self.penalty * expected_iterations_value(h)?)
    }

    pub fn expected_log_prior<'t>(&self, h: &[Var<'t>]) -> Result<Var<'t>> {
        self.check_len(h.len())?;
        let n = expected_iterations(h)?;
        Ok(n.affine(-self.penalty, self.log_normalizer))
    }
}
