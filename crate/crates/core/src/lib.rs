//! Iterative tuning of background-error covariances for variational data
//! assimilation.
//!
//! The crate is organised bottom-up:
//!
//! * [`spd`]: correlation kernels, covariance matrices, jittered Cholesky
//!   factorization, Gaussian sampling and the affine-invariant Riemannian
//!   distance between SPD matrices.
//! * [`assimilation`]: BLUE / 3D-VAR analysis and the naive, CUTE and PUB
//!   iterative schemes.
//! * [`tracker`]: exact error-covariance propagation driven by the operators
//!   a scheme applied, plus correlation-calibration metrics.
//! * [`shallow_water`]: first-order finite-difference Saint-Venant solver on a
//!   periodic grid.
//! * [`obs`]: random binomial selection observation operators.
//! * [`twin`]: Monte-Carlo twin experiments, static and dynamical.

pub mod assimilation;
pub mod error;
pub mod obs;
pub mod shallow_water;
pub mod spd;
pub mod tracker;
pub mod twin;

pub use error::{Error, Result};

#[cfg(test)]
mod test_util;
