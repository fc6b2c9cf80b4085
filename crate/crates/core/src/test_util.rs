//! Random fixtures shared by unit tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::spd::CovarianceMatrix;

/// `A Aᵀ + 0.1 I` with uniform entries, comfortably positive definite.
pub(crate) fn random_spd(n: usize, rng: &mut impl Rng) -> CovarianceMatrix {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
    CovarianceMatrix::from_symmetrized(m).unwrap()
}

pub(crate) fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub(crate) fn random_vector(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}
