//! Stick-breaking halting distributions over `1..=L` iterations.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mode::BlockMode;

const SUM_TOL: f64 = 1e-12;

fn check_gate(g: f64) -> Result<()> {
    if (0.0..=1.0).contains(&g) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(g))
    }
}

fn check_final(gates: &[f64]) -> Result<()> {
    match gates.last() {
        None => Err(Error::InvalidConfig("empty gate vector".into())),
        Some(&g) if g != 1.0 => Err(Error::FinalGateNotOne(g)),
        _ => gates.iter().try_for_each(|&g| check_gate(g)),
    }
}

/// `z^l = gate^l * prod_{i<l} (1 - gate^i)`; the final gate (1) absorbs the rest of the stick.
pub fn stick_break_values(gates: &[f64]) -> Result<Vec<f64>> {
    check_final(gates)?;
    let mut remaining = 1.0;
    let last = gates.len() - 1;
    Ok(gates
        .iter()
        .enumerate()
        .map(|(l, &g)| {
            if l == last {
                remaining
            } else {
                let z = g * remaining;
                remaining *= 1.0 - g;
                z
            }
        })
        .collect())
}

/// `q(z = l) = h^l prod_{i<l} (1 - h^i)` with `h^L = 1`.
pub fn halting_pmf(h: &[f64]) -> Result<Vec<f64>> {
    stick_break_values(h)
}

pub fn expected_iterations_value(h: &[f64]) -> Result<f64> {
    Ok(halting_pmf(h)?
        .iter()
        .enumerate()
        .map(|(l, p)| (l + 1) as f64 * p)
        .sum())
}

fn check_final_var(gates: &[Var<'_>]) -> Result<()> {
    let last = gates
        .last()
        .ok_or_else(|| Error::InvalidConfig("empty gate vector".into()))?;
    for v in last.value() {
        if v != 1.0 {
            return Err(Error::FinalGateNotOne(v));
        }
    }
    Ok(())
}

/// Differentiable stick-breaking over equally shaped gate tensors.
pub fn stick_break<'t>(gates: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
    check_final_var(gates)?;
    let tape = gates[0].tape();
    let shape = gates[0].shape();
    let mut remaining: Option<Var<'t>> = None;
    let mut out = Vec::with_capacity(gates.len());
    for (l, &g) in gates.iter().enumerate() {
        if l + 1 == gates.len() {
            out.push(match remaining {
                Some(r) => r,
                None => tape.constant(vec![1.0; g.numel()], &shape)?,
            });
        } else {
            let (z, rest) = match remaining {
                None => (g, g.one_minus()),
                Some(r) => (g.mul(r)?, r.mul(g.one_minus())?),
            };
            out.push(z);
            remaining = Some(rest);
        }
    }
    Ok(out)
}

/// `N = sum_l l * h^l * prod_{i<l} (1 - h^i)`, differentiable in `h`.
pub fn expected_iterations<'t>(h: &[Var<'t>]) -> Result<Var<'t>> {
    let pmf = stick_break(h)?;
    let terms: Vec<Var<'t>> = pmf
        .iter()
        .enumerate()
        .map(|(l, p)| p.affine((l + 1) as f64, 0.0))
        .collect();
    h[0].tape().add_all(&terms)
}

/// `log q(z)` from halting logits `logits[l]` for `l < L - 1`; `z` is 1-based.
pub fn log_halting_pmf_at<'t>(
    tape: &'t Tape,
    logits: &[Var<'t>],
    z: usize,
    support: usize,
) -> Result<Var<'t>> {
    if z == 0 || z > support {
        return Err(Error::OutOfSupport { value: z, max: support });
    }
    let needed = if z < support { z } else { z - 1 };
    if logits.len() < needed {
        return Err(Error::InvalidConfig(format!(
            "log q(z={z}) needs {needed} halting logits, got {}",
            logits.len()
        )));
    }
    let mut terms = Vec::with_capacity(z);
    for logit in &logits[..z - 1] {
        // log(1 - sigmoid(x)) = log sigmoid(-x)
        terms.push(logit.neg().log_sigmoid());
    }
    if z < support {
        terms.push(logits[z - 1].log_sigmoid());
    }
    if terms.is_empty() {
        // L = 1: the only outcome has probability one
        return Ok(tape.scalar(0.0));
    }
    tape.add_all(&terms)
}

/// Realized halting distribution of one latent variable.
#[derive(Debug, Clone, PartialEq)]
pub struct HaltingDistribution {
    pub mode: BlockMode,
    /// Halting probabilities over the executed horizon.
    pub halting: Vec<f64>,
    /// One-hot `z`, relaxed `ẑ`, or ACT weights over the same horizon.
    pub weights: Vec<f64>,
    /// `N` from `halting` with the last executed gate treated as 1.
    pub expected_iterations: f64,
}

impl HaltingDistribution {
    pub fn new(mode: BlockMode, halting: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if halting.len() != weights.len() || halting.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "halting_distribution",
                left: vec![halting.len()],
                right: vec![weights.len()],
            });
        }
        let mut forced = halting.clone();
        *forced.last_mut().unwrap() = 1.0;
        let expected_iterations = expected_iterations_value(&forced)?;
        let dist = Self {
            mode,
            halting,
            weights,
            expected_iterations,
        };
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > SUM_TOL || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "halting weights {:?} are not a probability vector",
                self.weights
            )));
        }
        if self.mode.is_one_hot() && self.weights.iter().any(|&w| w != 0.0 && w != 1.0) {
            return Err(Error::InvalidConfig(format!(
                "{} halting weights must be one-hot, got {:?}",
                self.mode, self.weights
            )));
        }
        Ok(())
    }

    /// Index (1-based) of the heaviest iteration.
    pub fn halting_step(&self) -> usize {
        self.weights
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &w)| if w > best.1 { (i, w) } else { best })
            .0
            + 1
    }
}
