use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Sliding-window length of the gradient-variance probe.
pub const DEFAULT_WINDOW: usize = 16;

/// `log10` of the mean, over parameters, of the unbiased per-parameter variance
/// across `samples`. Zero variance gives `-inf`.
pub fn log10_variance(samples: &[Vec<f64>]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(n));
    }
    let dim = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::ShapeMismatch {
            op: "variance_probe",
            left: vec![dim],
            right: vec![bad.len()],
        });
    }
    if dim == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut total = 0.0;
    for j in 0..dim {
        let mean = samples.iter().map(|s| s[j]).sum::<f64>() / n as f64;
        let ss: f64 = samples.iter().map(|s| (s[j] - mean).powi(2)).sum();
        total += ss / (n - 1) as f64;
    }
    Ok((total / dim as f64).log10())
}

/// Per-step variance over the most recent `window` gradient vectors.
#[derive(Debug, Clone)]
pub struct VarianceProbe {
    window: usize,
    samples: VecDeque<Vec<f64>>,
}

impl VarianceProbe {
    pub fn new(window: usize) -> Result<Self> {
        if window < 2 {
            return Err(Error::InsufficientSamples(window));
        }
        Ok(Self {
            window,
            samples: VecDeque::with_capacity(window),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Records one gradient; returns the probe once two samples are available.
    pub fn push(&mut self, gradient: Vec<f64>) -> Result<Option<f64>> {
        if self.samples.len() == self.window {
            self.samples.pop_front();
        }
        self.samples.push_back(gradient);
        if self.samples.len() < 2 {
            return Ok(None);
        }
        let slice: Vec<Vec<f64>> = self.samples.iter().cloned().collect();
        log10_variance(&slice).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_give_negative_infinity() {
        let v = log10_variance(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(v, f64::NEG_INFINITY);
    }

    #[test]
    fn two_scalar_samples() {
        let v = log10_variance(&[vec![0.0], vec![2.0]]).unwrap();
        assert!((v - 2f64.log10()).abs() < 1e-15);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(log10_variance(&[vec![1.0]]), Err(Error::InsufficientSamples(1))));
        assert!(VarianceProbe::new(1).is_err());
    }

    #[test]
    fn window_slides() {
        let mut p = VarianceProbe::new(2).unwrap();
        assert_eq!(p.push(vec![0.0]).unwrap(), None);
        assert!((p.push(vec![2.0]).unwrap().unwrap() - 2f64.log10()).abs() < 1e-15);
        // window now holds (2, 2)
        assert_eq!(p.push(vec![2.0]).unwrap(), Some(f64::NEG_INFINITY));
    }
}
