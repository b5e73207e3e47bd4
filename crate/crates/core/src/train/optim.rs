use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamStore;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Fractions of the run after which the learning rate drops by [`LR_DECAY_FACTOR`].
pub const LR_MILESTONES: [f64; 3] = [0.6, 0.75, 0.9];
pub const LR_DECAY_FACTOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

/// Step-decay schedule over a run of `total` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub total: usize,
}

impl LrSchedule {
    /// Learning rate for the 0-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        let passed = LR_MILESTONES
            .iter()
            .filter(|&&f| step as f64 >= f * self.total as f64)
            .count();
        self.base * LR_DECAY_FACTOR.powi(passed as i32)
    }
}

/// First-order optimizer with its per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore, weight_decay: f64) -> Self {
        Self {
            kind,
            momentum: DEFAULT_MOMENTUM,
            weight_decay,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update with gradients `grads` (same layout as `params`).
    ///
    /// SGD: `v ← μv + g`, `θ ← θ − η v`. Adam uses bias-corrected moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        self.steps += 1;
        let t = self.steps;
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.first[i], &mut self.second[i], &grads[i]);
            for j in 0..p.values.len() {
                let gj = g[j] + self.weight_decay * p.values[j];
                match self.kind {
                    OptimizerKind::SgdMomentum => {
                        m[j] = self.momentum * m[j] + gj;
                        p.values[j] -= lr * m[j];
                    }
                    OptimizerKind::Adam => {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                        let m_hat = m[j] / (1.0 - ADAM_BETA1.powi(t));
                        let v_hat = v[j] / (1.0 - ADAM_BETA2.powi(t));
                        p.values[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ParamTag;

    fn store(x: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("x", ParamTag::Body, &[x.len()], x.to_vec());
        s
    }

    #[test]
    fn sgd_momentum_on_quadratic() {
        // f(x) = x^2 / 2, g = x
        let mut p = store(&[2.0]);
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, &p, 0.0);
        opt.step(&mut p, &[vec![2.0]], 0.1).unwrap();
        assert!((p.get(0).values[0] - 1.8).abs() < 1e-15);
        opt.step(&mut p, &[vec![1.8]], 0.1).unwrap();
        // v = 0.9 * 2 + 1.8 = 3.6
        assert!((p.get(0).values[0] - (1.8 - 0.36)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_steps_match_formulas() {
        let mut p = store(&[1.0, -3.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &p, 0.0);
        let g1 = [0.5, -2.0];
        opt.step(&mut p, &[g1.to_vec()], 1e-3).unwrap();
        for (j, (&x0, &g)) in [1.0, -3.0].iter().zip(&g1).enumerate() {
            // bias-corrected moments equal g and g^2 after one step
            let expect = x0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p.get(0).values[j] - expect).abs() < 1e-12);
        }
        let before = p.get(0).values.clone();
        let g2 = [0.1, 0.3];
        opt.step(&mut p, &[g2.to_vec()], 1e-3).unwrap();
        for j in 0..2 {
            let m = 0.9 * 0.1 * g1[j] + 0.1 * g2[j];
            let v = 0.999 * 0.001 * g1[j] * g1[j] + 0.001 * g2[j] * g2[j];
            let m_hat = m / (1.0 - 0.81);
            let v_hat = v / (1.0 - 0.999f64 * 0.999);
            let expect = before[j] - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((p.get(0).values[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        let mut p = store(&[2.0]);
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, &p, 0.5);
        opt.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert!((p.get(0).values[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = LrSchedule { base: 0.1, total: 100 };
        assert_eq!(s.at(0), 0.1);
        assert_eq!(s.at(59), 0.1);
        assert!((s.at(60) / 0.01 - 1.0).abs() < 1e-12);
        assert!((s.at(75) / 0.001 - 1.0).abs() < 1e-12);
        assert!((s.at(99) / 1e-4 - 1.0).abs() < 1e-12);
    }
}
