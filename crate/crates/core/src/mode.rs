use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// How an adaptive computation block turns halting probabilities into a halting time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockMode {
    /// Sample Bernoulli gates; output is the iteration where the first gate fires.
    Discrete,
    /// Halt at the first `h > 0.5`; deterministic.
    Thresholded,
    /// Concrete-relaxed gates; output is the stick-breaking mixture of iterations.
    Relaxed,
    /// Cumulative-probability halting with remainder and ponder cost.
    Act,
}

impl BlockMode {
    pub const ALL: [BlockMode; 4] = [
        BlockMode::Relaxed,
        BlockMode::Discrete,
        BlockMode::Thresholded,
        BlockMode::Act,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BlockMode::Discrete => "discrete",
            BlockMode::Thresholded => "thresholded",
            BlockMode::Relaxed => "relaxed",
            BlockMode::Act => "act",
        }
    }

    /// Whether the block output is a single iteration rather than a mixture.
    pub fn is_one_hot(&self) -> bool {
        matches!(self, BlockMode::Discrete | BlockMode::Thresholded)
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, BlockMode::Discrete | BlockMode::Relaxed)
    }
}

impl fmt::Display for BlockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "discrete" => Ok(BlockMode::Discrete),
            "thresholded" => Ok(BlockMode::Thresholded),
            "relaxed" => Ok(BlockMode::Relaxed),
            "act" => Ok(BlockMode::Act),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode `{other}` (expected relaxed, discrete, thresholded or act)"
            ))),
        }
    }
}
