//! Exact error-covariance propagation and correlation-calibration metrics.
//!
//! The assumed-side scheme decides the operators; this module replays them
//! against the true error statistics of the background and observations.

use nalgebra::DMatrix;

use crate::assimilation::{extended_covariance, IterativeRun, ObservationOperator, StepOperator};
use crate::error::{Error, Result};
use crate::spd::{airm_distance, correlation_from_covariance, CovarianceMatrix, Point};

/// Pair distances closer than this are treated as equal.
pub const DISTANCE_TOL: f64 = 1e-9;
/// Calibration curves keep pair distances in `(0, MAX_CURVE_DISTANCE)`.
pub const MAX_CURVE_DISTANCE: f64 = 10.0;

/// Exact background error covariance and exact cross covariance with the
/// observation error, per iteration.
#[derive(Clone, Debug)]
pub struct ExactTrace {
    background_cov: CovarianceMatrix,
    cross_cov: DMatrix<f64>,
    history: Vec<(CovarianceMatrix, DMatrix<f64>)>,
}

impl ExactTrace {
    /// Starts with `Cov_E(ε_b, ε_y) = 0`.
    pub fn new(b_exact: CovarianceMatrix, obs_dim: usize) -> Self {
        let cross_cov = DMatrix::zeros(b_exact.dim(), obs_dim);
        Self {
            history: vec![(b_exact.clone(), cross_cov.clone())],
            background_cov: b_exact,
            cross_cov,
        }
    }

    pub fn background_cov(&self) -> &CovarianceMatrix {
        &self.background_cov
    }

    pub fn cross_cov(&self) -> &DMatrix<f64> {
        &self.cross_cov
    }

    /// `(B_E,n, Cov_E,n)` for `n = 0 ..= iterations()`.
    pub fn history(&self) -> &[(CovarianceMatrix, DMatrix<f64>)] {
        &self.history
    }

    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }

    /// Advances by one iteration of a scheme that applied `op`.
    pub fn step(&mut self, op: &StepOperator, r_exact: &CovarianceMatrix, h: &ObservationOperator) -> Result<()> {
        let (b, c) = exact_step(&self.background_cov, &self.cross_cov, op, r_exact, h)?;
        self.history.push((b.clone(), c.clone()));
        self.background_cov = b;
        self.cross_cov = c;
        Ok(())
    }
}

/// One exact update. For a gain `K`:
/// `B' = (I-KH) B (I-KH)ᵀ + (I-KH) C Kᵀ + K Cᵀ (I-KH)ᵀ + K R Kᵀ`,
/// `C' = (I-KH) C + K R`. For an extended estimator `G`:
/// `B' = G [[B, C], [Cᵀ, R]] Gᵀ`, `C' = G (C; R)`.
pub fn exact_step(
    b: &CovarianceMatrix,
    cross: &DMatrix<f64>,
    op: &StepOperator,
    r: &CovarianceMatrix,
    h: &ObservationOperator,
) -> Result<(CovarianceMatrix, DMatrix<f64>)> {
    let (n, m) = (h.state_dim(), h.obs_dim());
    if b.dim() != n {
        return Err(Error::dims("exact background covariance", n, b.dim()));
    }
    if r.dim() != m {
        return Err(Error::dims("exact observation covariance", m, r.dim()));
    }
    if cross.shape() != (n, m) {
        return Err(Error::dims("exact cross covariance", format!("{n}x{m}"), format!("{}x{}", cross.nrows(), cross.ncols())));
    }
    match op {
        StepOperator::Gain(k) => {
            if k.shape() != (n, m) {
                return Err(Error::dims("recorded gain", format!("{n}x{m}"), format!("{}x{}", k.nrows(), k.ncols())));
            }
            let ikh = DMatrix::identity(n, n) - k * h.matrix();
            let kr = k * r.matrix();
            let cross_term = &ikh * cross * k.transpose();
            let next = &ikh * b.matrix() * ikh.transpose() + &cross_term + cross_term.transpose() + &kr * k.transpose();
            let next_cross = &ikh * cross + kr;
            Ok((CovarianceMatrix::from_symmetrized(next)?, next_cross))
        }
        StepOperator::Extended(g) => {
            if g.shape() != (n, n + m) {
                return Err(Error::dims(
                    "recorded extended estimator",
                    format!("{n}x{}", n + m),
                    format!("{}x{}", g.nrows(), g.ncols()),
                ));
            }
            let c = extended_covariance(b.matrix(), cross, r.matrix());
            let next = g * c * g.transpose();
            let next_cross = g.columns(0, n) * cross + g.columns(n, m) * r.matrix();
            Ok((CovarianceMatrix::from_symmetrized(next)?, next_cross))
        }
    }
}

/// Replays every operator of `run` against the exact statistics.
pub fn track(
    run: &IterativeRun,
    b_exact: &CovarianceMatrix,
    r_exact: &CovarianceMatrix,
    h: &ObservationOperator,
) -> Result<ExactTrace> {
    track_operators(&run.operators, b_exact, r_exact, h)
}

pub fn track_operators(
    operators: &[StepOperator],
    b_exact: &CovarianceMatrix,
    r_exact: &CovarianceMatrix,
    h: &ObservationOperator,
) -> Result<ExactTrace> {
    let mut trace = ExactTrace::new(b_exact.clone(), h.obs_dim());
    for op in operators {
        trace.step(op, r_exact, h)?;
    }
    Ok(trace)
}

/// Mean correlation per distinct pair distance.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedCurve {
    pub distances: Vec<f64>,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
}

impl CalibratedCurve {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

/// Calibration curve of the block of `cov` starting at `block_start` whose
/// points sit at `coords`. Pairs are grouped by distance within
/// [`DISTANCE_TOL`], only distances in `(0, MAX_CURVE_DISTANCE)` are kept.
pub fn calibrate_correlation(cov: &CovarianceMatrix, coords: &[Point], block_start: usize) -> Result<CalibratedCurve> {
    let block = cov.sub_block(block_start, coords.len())?;
    let (_, cor) = correlation_from_covariance(&block)?;
    let n = coords.len();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            let r = ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
            if r > DISTANCE_TOL && r < MAX_CURVE_DISTANCE {
                pairs.push((r, cor.matrix()[(i, j)]));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut curve = CalibratedCurve {
        distances: Vec::new(),
        values: Vec::new(),
        counts: Vec::new(),
    };
    let mut sum = 0.0;
    for (r, c) in pairs {
        match curve.distances.last() {
            Some(&d) if r - d <= DISTANCE_TOL => {
                *curve.counts.last_mut().unwrap() += 1;
                sum += c;
            }
            _ => {
                if let Some(count) = curve.counts.last() {
                    curve.values.push(sum / *count as f64);
                }
                curve.distances.push(r);
                curve.counts.push(1);
                sum = c;
            }
        }
    }
    if let Some(count) = curve.counts.last() {
        curve.values.push(sum / *count as f64);
    }
    Ok(curve)
}

/// L2 norm of the difference of two curves on the same distance support.
pub fn correlation_mismatch(a: &CalibratedCurve, b: &CalibratedCurve) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("calibration curve support", a.len(), b.len()));
    }
    if let Some((x, y)) = a
        .distances
        .iter()
        .zip(&b.distances)
        .find(|(x, y)| (*x - *y).abs() > DISTANCE_TOL)
    {
        return Err(Error::InvalidParameter(format!(
            "calibration curves have different supports ({x} vs {y})"
        )));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// AIRM between the correlation parts of two covariances.
pub fn airm_between_correlations(assumed: &CovarianceMatrix, exact: &CovarianceMatrix) -> Result<f64> {
    let (_, ca) = correlation_from_covariance(assumed)?;
    let (_, ce) = correlation_from_covariance(exact)?;
    airm_distance(&ca, &ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assimilation::{run_iterative, AssimilationProblem, Method, TuningConfig};
    use crate::spd::{build_correlation_matrix, covariance_from_correlation, grid_coordinates, CorrelationKernel, DiagonalScale, KernelKind};
    use crate::test_util::{random_matrix, random_spd, random_vector};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> CovarianceMatrix {
        CovarianceMatrix::scaled_identity(1, v)
    }

    fn scalar_run(method: Method, b: f64, iters: usize) -> IterativeRun {
        let p = AssimilationProblem::new(
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            scalar(b),
            scalar(1.0),
            ObservationOperator::identity(1),
        )
        .unwrap();
        run_iterative(&p, &TuningConfig::new(method, 1.0, iters).unwrap()).unwrap()
    }

    #[test]
    fn scalar_naive_first_step() {
        let run = scalar_run(Method::Naive, 3.0, 1);
        let t = track(&run, &scalar(3.0), &scalar(1.0), &ObservationOperator::identity(1)).unwrap();
        assert_relative_eq!(t.background_cov().matrix()[(0, 0)], 0.75, max_relative = 1e-15);
    }

    #[test]
    fn scalar_cute_perfect_prior_matches_assumed() {
        let run = scalar_run(Method::Cute, 3.0, 2);
        let t = track(&run, &scalar(3.0), &scalar(1.0), &ObservationOperator::identity(1)).unwrap();
        let exact = t.history()[2].0.matrix()[(0, 0)];
        assert_relative_eq!(exact, 39.0 / 49.0, max_relative = 1e-14);
        assert_relative_eq!(exact, run.assumed_posteriors[1].matrix()[(0, 0)], max_relative = 1e-14);
    }

    #[test]
    fn zero_gain_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_spd(4, &mut rng);
        let h = ObservationOperator::new(random_matrix(2, 4, &mut rng)).unwrap();
        let (next, cross) =
            exact_step(&b, &DMatrix::zeros(4, 2), &StepOperator::Gain(DMatrix::zeros(4, 2)), &random_spd(2, &mut rng), &h)
                .unwrap();
        assert_eq!(next, b);
        assert_eq!(cross, DMatrix::zeros(4, 2));
    }

    #[test]
    fn rejects_mismatched_gain() {
        let h = ObservationOperator::identity(2);
        let err = exact_step(
            &CovarianceMatrix::identity(2),
            &DMatrix::zeros(2, 2),
            &StepOperator::Gain(DMatrix::zeros(3, 2)),
            &CovarianceMatrix::identity(2),
            &h,
        );
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn naive_scalar_exact_stays_away_from_zero() {
        let run = scalar_run(Method::Naive, 3.0, 50);
        let t = track(&run, &scalar(3.0), &scalar(1.0), &ObservationOperator::identity(1)).unwrap();
        for (n, (b, _)) in t.history().iter().enumerate() {
            assert!(b.matrix()[(0, 0)] >= 0.7, "n={n}");
        }
        assert!(run.last().background_cov.matrix()[(0, 0)] < 0.02);
    }

    #[test]
    fn gain_and_extended_forms_agree() {
        // a gain step is the extended estimator G = [I - KH, K]
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, m) = (5, 3);
        let h = ObservationOperator::new(random_matrix(m, n, &mut rng)).unwrap();
        let b = random_spd(n, &mut rng);
        let r = random_spd(m, &mut rng);
        let cross = random_matrix(n, m, &mut rng) * 0.1;
        let k = random_matrix(n, m, &mut rng);
        let mut g = DMatrix::zeros(n, n + m);
        g.columns_mut(0, n).copy_from(&(DMatrix::identity(n, n) - &k * h.matrix()));
        g.columns_mut(n, m).copy_from(&k);
        let (b1, c1) = exact_step(&b, &cross, &StepOperator::Gain(k), &r, &h).unwrap();
        let (b2, c2) = exact_step(&b, &cross, &StepOperator::Extended(g), &r, &h).unwrap();
        assert!((b1.matrix() - b2.matrix()).amax() < 1e-10);
        assert!((c1 - c2).amax() < 1e-10);
    }

    #[test]
    fn exact_covariances_stay_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for method in [Method::Naive, Method::Cute, Method::Pub] {
            let h = ObservationOperator::new(random_matrix(6, 10, &mut rng)).unwrap();
            let b_a = random_spd(10, &mut rng);
            let b_e = random_spd(10, &mut rng);
            let r = random_spd(6, &mut rng);
            let p = AssimilationProblem::new(random_vector(10, &mut rng), random_vector(6, &mut rng), b_a, r.clone(), h.clone())
                .unwrap();
            let run = run_iterative(&p, &TuningConfig::new(method, 0.5, 10).unwrap()).unwrap();
            let t = track(&run, &b_e, &r, &h).unwrap();
            for (b, _) in t.history() {
                let min = b.matrix().clone().symmetric_eigenvalues().min();
                assert!(min >= -1e-8 * b.trace(), "{method}: {min}");
            }
        }
    }

    fn grid_coords() -> Vec<Point> {
        grid_coordinates(10, 10)
    }

    #[test]
    fn calibration_recovers_kernel() {
        let coords = grid_coords();
        let kern = CorrelationKernel::new(KernelKind::Balgovind, 2.0).unwrap();
        let cor = build_correlation_matrix(&kern, &coords).unwrap();
        let d = DiagonalScale::new(DVector::from_fn(100, |i, _| 0.5 + i as f64 * 0.01)).unwrap();
        let cov = covariance_from_correlation(&d, &cor).unwrap();
        let curve = calibrate_correlation(&cov, &coords, 0).unwrap();
        assert!(!curve.is_empty());
        for (r, v) in curve.distances.iter().zip(&curve.values) {
            assert!((v - kern.eval(*r).unwrap()).abs() < 1e-10);
            assert!(*r > 0.0 && *r < 10.0);
        }
        assert!(curve.distances.windows(2).all(|w| w[0] < w[1]));
        assert!(curve.counts.iter().all(|&c| c >= 1));
        // 1 and 2 are both distances on a 10x10 unit grid
        assert_relative_eq!(curve.distances[0], 1.0);
        assert_eq!(curve.counts[0], 180);
    }

    #[test]
    fn calibration_of_identity_is_flat_zero() {
        let curve = calibrate_correlation(&CovarianceMatrix::identity(100), &grid_coords(), 0).unwrap();
        assert!(curve.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn calibration_two_points() {
        let cov = CovarianceMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0])).unwrap();
        let curve = calibrate_correlation(&cov, &[[0.0, 0.0], [1.0, 0.0]], 0).unwrap();
        assert_eq!(curve.distances, vec![1.0]);
        assert_relative_eq!(curve.values[0], 0.3, max_relative = 1e-15);
        assert_eq!(curve.counts, vec![1]);
    }

    #[test]
    fn calibration_uses_requested_block() {
        let coords = grid_coordinates(2, 2);
        let kern = CorrelationKernel::new(KernelKind::Exponential, 1.0).unwrap();
        let block = build_correlation_matrix(&kern, &coords).unwrap();
        let full = CovarianceMatrix::block_diagonal(&[&CovarianceMatrix::identity(4), &block]);
        let curve = calibrate_correlation(&full, &coords, 4).unwrap();
        assert_relative_eq!(curve.values[0], (-1.0f64).exp(), max_relative = 1e-14);
        assert!(calibrate_correlation(&full, &coords, 5).is_err());
    }

    #[test]
    fn calibration_rejects_zero_variance() {
        let cov = CovarianceMatrix::diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        let err = calibrate_correlation(&cov, &[[0.0, 0.0], [1.0, 0.0]], 0);
        assert!(matches!(err, Err(Error::DegenerateVariance { index: 1, .. })));
    }

    #[test]
    fn mismatch_examples() {
        let a = CalibratedCurve {
            distances: vec![1.0, 2.0, 3.0, 4.0],
            values: vec![0.5, 0.4, 0.3, 0.2],
            counts: vec![1; 4],
        };
        let mut b = a.clone();
        b.values.iter_mut().for_each(|v| *v += 0.1);
        assert_eq!(correlation_mismatch(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(correlation_mismatch(&a, &b).unwrap(), 0.2, max_relative = 1e-12);
        assert_eq!(correlation_mismatch(&a, &b).unwrap(), correlation_mismatch(&b, &a).unwrap());
        let mut c = a.clone();
        c.distances[2] = 3.5;
        assert!(correlation_mismatch(&a, &c).is_err());
        c.distances.pop();
        assert!(correlation_mismatch(&a, &c).is_err());
    }

    #[test]
    fn airm_between_correlations_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_spd(6, &mut rng);
        assert!(airm_between_correlations(&a, &a).unwrap() < 1e-10);

        // correlations ignore variances
        let b = random_spd(6, &mut rng);
        let d1 = DiagonalScale::new(DVector::from_fn(6, |i, _| 1.0 + i as f64)).unwrap();
        let d2 = DiagonalScale::new(DVector::from_fn(6, |i, _| 0.1 / (1.0 + i as f64))).unwrap();
        let (_, ca) = correlation_from_covariance(&a).unwrap();
        let (_, cb) = correlation_from_covariance(&b).unwrap();
        let base = airm_between_correlations(&a, &b).unwrap();
        let rescaled = airm_between_correlations(
            &covariance_from_correlation(&d1, &ca).unwrap(),
            &covariance_from_correlation(&d2, &cb).unwrap(),
        )
        .unwrap();
        assert_relative_eq!(base, rescaled, max_relative = 1e-9);

        // equicorrelated pair: eigenvalues 1 ± ρ against the identity
        let rho = 0.4;
        let c = CovarianceMatrix::new(DMatrix::from_row_slice(2, 2, &[4.0, 4.0 * rho, 4.0 * rho, 4.0])).unwrap();
        let expected = ((1.0 + rho).ln().powi(2) + (1.0 - rho).ln().powi(2)).sqrt();
        assert_relative_eq!(
            airm_between_correlations(&CovarianceMatrix::scaled_identity(2, 3.0), &c).unwrap(),
            expected,
            max_relative = 1e-12
        );
    }
}
