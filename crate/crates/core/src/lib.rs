//! Probabilistic adaptive computation time at desk scale.
//!
//! Adaptive computation blocks choose how many iterations of a residual or
//! recurrent body to run. The number of iterations is a discrete latent
//! variable with a truncated-geometric prior; halting heads are trained by
//! stochastic variational optimization using either score-function
//! (REINFORCE) gradients through discrete blocks or reparameterized gradients
//! through Concrete-relaxed blocks.
//!
//! - [`autodiff`]: reverse-mode differentiation tape over `f64` tensors.
//! - [`stochastic`]: samplers, halting distributions, prior and estimators.
//! - [`blocks`]: discrete, thresholded, relaxed and ACT block executors.
//! - [`models`]: residual stack, spatial grid and adaptive RNN toy models.
//! - [`train`]: objectives, optimizers, training and evaluation loops.

pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod mode;
pub mod models;
pub mod train;
pub mod stochastic;

pub use error::{Error, Result};
pub use mode::BlockMode;
