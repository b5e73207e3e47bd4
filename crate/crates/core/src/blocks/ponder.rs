//! ACT halting weights on plain numbers, and the ponder-cost sweep built on them.

use std::io::Write;

use crate::error::{Error, Result};

pub const DEFAULT_PONDER_TAIL: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
pub const DEFAULT_PONDER_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutcome {
    /// Weights over the executed steps; they sum to one.
    pub weights: Vec<f64>,
    /// Number of executed steps `N`.
    pub steps: usize,
    /// Remainder `R` assigned to the halting step.
    pub remainder: f64,
    /// `ρ = N + R`.
    pub ponder: f64,
}

/// ACT halting over probabilities `h^1..h^L`; the last entry is treated as 1.
pub fn act_weights(h: &[f64], epsilon: f64) -> Result<ActOutcome> {
    if h.is_empty() {
        return Err(Error::InvalidConfig("ACT needs at least one halting probability".into()));
    }
    if let Some(&bad) = h.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidProbability(bad));
    }
    let last = h.len();
    let (mut cumulative, mut remainder) = (0.0, 1.0);
    let mut weights = Vec::new();
    for (i, &p) in h.iter().enumerate() {
        let l = i + 1;
        let p = if l == last { 1.0 } else { p };
        cumulative += p;
        if l < last && cumulative < 1.0 - epsilon {
            weights.push(p);
            remainder -= p;
        } else {
            weights.push(remainder);
            return Ok(ActOutcome {
                weights,
                steps: l,
                remainder,
                ponder: l as f64 + remainder,
            });
        }
    }
    unreachable!("the last step always halts")
}

/// `(h^1, ρ)` on a uniform grid of `points` values of `h^1` in `[0, 1]`,
/// with the remaining halting probabilities fixed to `tail`.
pub fn ponder_demo(tail: &[f64], points: usize, epsilon: f64) -> Result<Vec<(f64, f64)>> {
    if points < 2 {
        return Err(Error::InvalidConfig(format!("ponder sweep needs at least 2 points, got {points}")));
    }
    let mut h = Vec::with_capacity(tail.len() + 1);
    (0..points)
        .map(|i| {
            let h1 = i as f64 / (points - 1) as f64;
            h.clear();
            h.push(h1);
            h.extend_from_slice(tail);
            Ok((h1, act_weights(&h, epsilon)?.ponder))
        })
        .collect()
}

/// Writes the sweep as CSV with header `h1,rho`.
pub fn write_ponder_csv<W: Write>(out: W, rows: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["h1", "rho"])?;
    for (h1, rho) in rows {
        w.write_record([h1.to_string(), rho.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 0.01;

    #[test]
    fn zero_first_probability() {
        let out = act_weights(&[0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], EPS).unwrap();
        assert_eq!(out.steps, 4);
        assert!((out.remainder - 1.0 / 3.0).abs() < 1e-12);
        assert!((out.ponder - (4.0 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn boundary_fails_strict_comparison() {
        let out = act_weights(&[0.99, 0.5], EPS).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        assert_eq!(out.ponder, 2.0);
    }

    #[test]
    fn jump_at_analytic_crossing() {
        let rows = ponder_demo(&DEFAULT_PONDER_TAIL, 200, EPS).unwrap();
        assert_eq!(rows.len(), 200);
        let crossing = 0.99 - 2.0 / 3.0;
        let i = rows.iter().position(|(h1, _)| *h1 >= crossing).unwrap();
        assert!(rows[i - 1].1 - rows[i].1 >= 0.5);
    }

    #[test]
    fn slope_is_minus_one_while_first_probability_contributes() {
        let rows = ponder_demo(&DEFAULT_PONDER_TAIL, 200, EPS).unwrap();
        let steps = |h1: f64| {
            let mut h = vec![h1];
            h.extend_from_slice(&DEFAULT_PONDER_TAIL);
            act_weights(&h, EPS).unwrap().steps
        };
        for pair in rows.windows(2) {
            let ((a, ra), (b, rb)) = (pair[0], pair[1]);
            if steps(a) != steps(b) {
                continue;
            }
            let slope = (rb - ra) / (b - a);
            // with one step the remainder no longer depends on h1
            let expect = if steps(a) == 1 { 0.0 } else { -1.0 };
            assert!((slope - expect).abs() < 1e-9, "slope {slope} at {a}");
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let mut buf = Vec::new();
        write_ponder_csv(&mut buf, &[(0.0, 4.5), (1.0, 2.0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "h1,rho\n0,4.5\n1,2\n");
    }
}
