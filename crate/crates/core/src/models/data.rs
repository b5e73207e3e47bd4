//! Synthetic tasks generated on the fly from a random stream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stochastic::RngStream;

/// One input with its target class (one per timestep for sequences).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub shape: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    /// Gaussian clusters, one per class, with class-dependent spread.
    Mixture { dim: usize, classes: usize },
    /// Two to four strokes of one of four orientations at random spots of a noisy square image.
    Pattern { size: usize },
    /// Running parity of a random bit string, one target per bit.
    Parity { min_len: usize, max_len: usize },
}

pub const PATTERN_CLASSES: usize = 4;
const MIXTURE_SCALE: f64 = 1.5;
const PATTERN_AMPLITUDE: f64 = 1.5;

/// Side of the square a stroke is drawn in.
const STROKE_LEN: usize = 5;

/// Offsets of stroke `c` (horizontal, vertical, diagonal, anti-diagonal) inside its square.
fn stroke_cells(c: usize) -> impl Iterator<Item = (usize, usize)> {
    let mid = STROKE_LEN / 2;
    (0..STROKE_LEN).map(move |i| match c {
        0 => (mid, i),
        1 => (i, mid),
        2 => (i, i),
        _ => (i, STROKE_LEN - 1 - i),
    })
}

impl Task {
    pub fn classes(&self) -> usize {
        match *self {
            Task::Mixture { classes, .. } => classes,
            Task::Pattern { .. } => PATTERN_CLASSES,
            Task::Parity { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Task::Mixture { dim, classes } => dim >= 1 && classes >= 2,
            Task::Pattern { size } => size >= 3,
            Task::Parity { min_len, max_len } => min_len >= 1 && min_len <= max_len,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid task {self:?}")))
        }
    }

    /// Centre of mixture class `c`: `scale * (e_{2c} + e_{2c+1})`, indices taken modulo `dim`.
    pub fn mixture_mean(dim: usize, c: usize) -> Vec<f64> {
        let mut m = vec![0.0; dim];
        m[(2 * c) % dim] += MIXTURE_SCALE;
        m[(2 * c + 1) % dim] += MIXTURE_SCALE;
        m
    }

    /// Noise level of mixture class `c`; later classes overlap more.
    pub fn mixture_spread(c: usize) -> f64 {
        0.5 + 0.15 * c as f64
    }

    pub fn sample(&self, rng: &mut RngStream) -> Example {
        match *self {
            Task::Mixture { dim, classes } => {
                let c = rng.below(classes);
                let spread = Self::mixture_spread(c);
                let input = Self::mixture_mean(dim, c)
                    .into_iter()
                    .map(|m| m + spread * rng.normal())
                    .collect();
                Example {
                    input,
                    shape: vec![dim],
                    targets: vec![c],
                }
            }
            Task::Pattern { size } => {
                let c = rng.below(PATTERN_CLASSES);
                let noise = 0.2 + 0.4 * rng.uniform();
                let strokes = 2 + rng.below(3);
                let mut input: Vec<f64> = (0..size * size).map(|_| noise * rng.normal()).collect();
                let span = size.saturating_sub(STROKE_LEN) + 1;
                for _ in 0..strokes {
                    let (y0, x0) = (rng.below(span), rng.below(span));
                    for (dy, dx) in stroke_cells(c) {
                        let (y, x) = (y0 + dy, x0 + dx);
                        if y < size && x < size {
                            input[y * size + x] += PATTERN_AMPLITUDE;
                        }
                    }
                }
                Example {
                    input,
                    shape: vec![1, size, size],
                    targets: vec![c],
                }
            }
            Task::Parity { min_len, max_len } => {
                let len = min_len + rng.below(max_len - min_len + 1);
                let mut input = vec![0.0; len * 2];
                let mut targets = Vec::with_capacity(len);
                let mut parity = 0;
                for t in 0..len {
                    let bit = rng.below(2);
                    input[t * 2 + bit] = 1.0;
                    parity ^= bit;
                    targets.push(parity);
                }
                Example {
                    input,
                    shape: vec![len, 2],
                    targets,
                }
            }
        }
    }

    pub fn batch(&self, n: usize, rng: &mut RngStream) -> Vec<Example> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_shapes_and_classes() {
        let task = Task::Mixture { dim: 8, classes: 4 };
        let mut rng = RngStream::new(0, 0);
        let mut seen = [0usize; 4];
        for ex in task.batch(400, &mut rng) {
            assert_eq!(ex.shape, vec![8]);
            seen[ex.targets[0]] += 1;
        }
        assert!(seen.iter().all(|&n| n > 60));
    }

    #[test]
    fn mixture_means_are_separated() {
        for a in 0..4 {
            for b in 0..a {
                let (ma, mb) = (Task::mixture_mean(8, a), Task::mixture_mean(8, b));
                let d2: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
                assert!((d2.sqrt() - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parity_targets_are_running_xor() {
        let task = Task::Parity { min_len: 8, max_len: 16 };
        let mut rng = RngStream::new(1, 0);
        for ex in task.batch(50, &mut rng) {
            let len = ex.shape[0];
            assert!((8..=16).contains(&len));
            let mut p = 0;
            for t in 0..len {
                let bit = if ex.input[t * 2 + 1] == 1.0 { 1 } else { 0 };
                assert_eq!(ex.input[t * 2] + ex.input[t * 2 + 1], 1.0);
                p ^= bit;
                assert_eq!(ex.targets[t], p);
            }
        }
    }

    #[test]
    fn pattern_contains_its_stroke() {
        let task = Task::Pattern { size: 16 };
        let mut rng = RngStream::new(2, 0);
        let ex = task.sample(&mut rng);
        assert_eq!(ex.shape, vec![1, 16, 16]);
        let strong = ex.input.iter().filter(|v| **v > 1.0).count();
        assert!(strong >= 2);
    }

    #[test]
    fn same_stream_same_data() {
        let task = Task::Mixture { dim: 8, classes: 4 };
        let a = task.batch(5, &mut RngStream::new(9, 1));
        let b = task.batch(5, &mut RngStream::new(9, 1));
        assert_eq!(a, b);
    }
}
