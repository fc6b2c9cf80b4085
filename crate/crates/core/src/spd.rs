//! Correlation kernels, covariance matrices and SPD numerics.
//!
//! All distances are in grid units (cell spacing 1).

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative asymmetry tolerated when a matrix is accepted as a covariance.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues below `-SEMIDEFINITE_TOL * trace` reject a covariance.
pub const SEMIDEFINITE_TOL: f64 = 1e-10;
/// Eigenvalue floor (relative to the largest eigenvalue) used before logs
/// and inverse square roots.
pub const EIGEN_FLOOR: f64 = 1e-14;
/// First non-zero jitter, relative to `trace / dim`.
pub const JITTER_START: f64 = 1e-14;
/// Number of tenfold jitter escalations after the first non-zero jitter.
pub const JITTER_ESCALATIONS: usize = 3;

/// A point of the observation grid, `[x, y]` in grid units.
pub type Point = [f64; 2];

/// Row-major coordinates of a `rows x cols` grid; `x` is the column index.
pub fn grid_coordinates(rows: usize, cols: usize) -> Vec<Point> {
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| [c as f64, r as f64]))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// `exp(-r/L)`, Matérn 1/2.
    Exponential,
    /// `(1 + r/L) exp(-r/L)`, Matérn 3/2.
    Balgovind,
    /// `exp(-r²/2L²)`, the Matérn limit.
    Gaussian,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [
        KernelKind::Exponential,
        KernelKind::Balgovind,
        KernelKind::Gaussian,
    ];
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            KernelKind::Exponential => "exponential",
            KernelKind::Balgovind => "balgovind",
            KernelKind::Gaussian => "gaussian",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" => Ok(KernelKind::Exponential),
            "balgovind" | "matern32" => Ok(KernelKind::Balgovind),
            "gaussian" => Ok(KernelKind::Gaussian),
            other => Err(Error::InvalidParameter(format!("unknown kernel '{other}'"))),
        }
    }
}

/// Homogeneous isotropic correlation function with length scale `L`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationKernel {
    kind: KernelKind,
    length_scale: f64,
}

impl CorrelationKernel {
    pub fn new(kind: KernelKind, length_scale: f64) -> Result<Self> {
        if !(length_scale.is_finite() && length_scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel length scale must be positive, got {length_scale}"
            )));
        }
        Ok(Self { kind, length_scale })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    /// Correlation at distance `r >= 0`; the value at zero is exactly one.
    pub fn eval(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel distance must be non-negative, got {r}"
            )));
        }
        let s = r / self.length_scale;
        Ok(match self.kind {
            KernelKind::Exponential => (-s).exp(),
            KernelKind::Balgovind => (1.0 + s) * (-s).exp(),
            KernelKind::Gaussian => (-0.5 * s * s).exp(),
        })
    }
}

impl fmt::Display for CorrelationKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(L={})", self.kind, self.length_scale)
    }
}

pub fn kernel_eval(kernel: &CorrelationKernel, r: f64) -> Result<f64> {
    kernel.eval(r)
}

/// Lower-triangular factor `F` with `F Fᵀ = Cov + jitter I`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, nalgebra::Dyn>,
    jitter: f64,
}

impl SpdFactor {
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Solves `(Cov + jitter I) X = rhs`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_vector(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// `F Fᵀ`, mostly for diagnostics and tests.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }

    /// `F z` for a column vector `z`.
    pub fn mul_lower(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().lower_triangle() * z
    }
}

/// Symmetric positive (semi-)definite matrix with a lazily computed factor.
#[derive(Clone, Debug)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
    factor: OnceLock<SpdFactor>,
}

impl PartialEq for CovarianceMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl CovarianceMatrix {
    /// Accepts a square, finite matrix that is symmetric to `SYMMETRY_TOL`
    /// relative; the stored matrix is exactly symmetric.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        check_square(&entries, "covariance")?;
        let scale = entries.amax();
        let asym = (&entries - entries.transpose()).amax();
        if asym > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) && asym > 0.0 {
            return Err(Error::InvalidParameter(format!(
                "covariance is not symmetric (max asymmetry {asym:e}, scale {scale:e})"
            )));
        }
        Ok(Self::symmetrized(entries))
    }

    /// Stores `(M + Mᵀ) / 2`. Intended for algorithm outputs whose asymmetry
    /// is floating-point drift.
    pub fn from_symmetrized(entries: DMatrix<f64>) -> Result<Self> {
        check_square(&entries, "covariance")?;
        Ok(Self::symmetrized(entries))
    }

    fn symmetrized(entries: DMatrix<f64>) -> Self {
        let sym = (&entries + entries.transpose()) * 0.5;
        Self {
            entries: sym,
            factor: OnceLock::new(),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::symmetrized(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self::symmetrized(DMatrix::identity(dim, dim))
    }

    pub fn scaled_identity(dim: usize, variance: f64) -> Self {
        Self::symmetrized(DMatrix::identity(dim, dim) * variance)
    }

    pub fn diagonal(values: &DVector<f64>) -> Self {
        Self::symmetrized(DMatrix::from_diagonal(values))
    }

    /// Block-diagonal assembly, zero off-diagonal blocks.
    pub fn block_diagonal(blocks: &[&CovarianceMatrix]) -> Self {
        let dim = blocks.iter().map(|b| b.dim()).sum();
        let mut m = DMatrix::zeros(dim, dim);
        let mut offset = 0;
        for b in blocks {
            let d = b.dim();
            m.view_mut((offset, offset), (d, d)).copy_from(&b.entries);
            offset += d;
        }
        Self::symmetrized(m)
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&v| v == 0.0)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::symmetrized(&self.entries * c)
    }

    /// Principal sub-block `[start, start + len)`.
    pub fn sub_block(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.dim() || len == 0 {
            return Err(Error::dims(
                "covariance sub-block",
                format!("range within 0..{}", self.dim()),
                format!("{start}..{}", start + len),
            ));
        }
        Ok(Self::symmetrized(
            self.entries.view((start, start), (len, len)).into_owned(),
        ))
    }

    /// Jitter added by the cached factorization, zero if none was needed or
    /// the matrix has not been factorized yet.
    pub fn jitter_applied(&self) -> f64 {
        self.factor.get().map_or(0.0, SpdFactor::jitter)
    }

    /// Cached [`spd_factorize`].
    pub fn factor(&self) -> Result<&SpdFactor> {
        if let Some(f) = self.factor.get() {
            return Ok(f);
        }
        let f = spd_factorize(self)?;
        Ok(self.factor.get_or_init(|| f))
    }

    /// Checks that every eigenvalue is at least `-SEMIDEFINITE_TOL * trace`
    /// and that the trace is positive.
    pub fn validate_semidefinite(&self) -> Result<()> {
        let trace = self.trace();
        if !(trace > 0.0) {
            return Err(Error::NotPositiveDefinite {
                context: format!("trace {trace:e} is not positive"),
            });
        }
        let min = self.entries.clone().symmetric_eigenvalues().min();
        if min < -SEMIDEFINITE_TOL * trace {
            return Err(Error::NotPositiveDefinite {
                context: format!("eigenvalue {min:e} below tolerance (trace {trace:e})"),
            });
        }
        Ok(())
    }
}

fn check_square(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::dims(
            context,
            "non-empty square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "{context} has non-finite entries"
        )));
    }
    Ok(())
}

/// Positive variances, the `D` of `Cov = D^½ Cor D^½`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalScale {
    values: DVector<f64>,
}

impl DiagonalScale {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("empty diagonal scale".into()));
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::DegenerateVariance { index, value });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Correlation matrix from a kernel evaluated on pairwise Euclidean
/// distances.
pub fn build_correlation_matrix(kernel: &CorrelationKernel, coords: &[Point]) -> Result<CovarianceMatrix> {
    if coords.is_empty() {
        return Err(Error::InvalidParameter("no coordinates".into()));
    }
    let n = coords.len();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            let v = kernel.eval((dx * dx + dy * dy).sqrt())?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    CovarianceMatrix::new(m)
}

/// `D^½ Cor D^½`.
pub fn covariance_from_correlation(d: &DiagonalScale, cor: &CovarianceMatrix) -> Result<CovarianceMatrix> {
    if d.dim() != cor.dim() {
        return Err(Error::dims("covariance_from_correlation", d.dim(), cor.dim()));
    }
    if let Some(i) = (0..cor.dim()).find(|&i| (cor.matrix()[(i, i)] - 1.0).abs() > 1e-10) {
        return Err(Error::InvalidParameter(format!(
            "correlation diagonal entry {i} is {} instead of 1",
            cor.matrix()[(i, i)]
        )));
    }
    let s = d.values.map(f64::sqrt);
    let m = DMatrix::from_fn(cor.dim(), cor.dim(), |i, j| s[i] * cor.matrix()[(i, j)] * s[j]);
    CovarianceMatrix::from_symmetrized(m)
}

/// Splits a covariance into variances and a unit-diagonal correlation.
pub fn correlation_from_covariance(cov: &CovarianceMatrix) -> Result<(DiagonalScale, CovarianceMatrix)> {
    let diag = cov.matrix().diagonal();
    let d = DiagonalScale::new(diag)?;
    let inv_s = d.values.map(|v| 1.0 / v.sqrt());
    let n = cov.dim();
    let mut m = DMatrix::from_fn(n, n, |i, j| inv_s[i] * cov.matrix()[(i, j)] * inv_s[j]);
    m.fill_diagonal(1.0);
    Ok((d, CovarianceMatrix::from_symmetrized(m)?))
}

/// Cholesky factorization with the escalating-jitter policy: try without
/// jitter, then with `JITTER_START * trace / dim` and up to
/// `JITTER_ESCALATIONS` tenfold increases.
pub fn spd_factorize(cov: &CovarianceMatrix) -> Result<SpdFactor> {
    let n = cov.dim();
    if let Some(chol) = Cholesky::new(cov.matrix().clone()) {
        return Ok(SpdFactor { chol, jitter: 0.0 });
    }
    let base = JITTER_START * cov.trace() / n as f64;
    if base > 0.0 {
        let mut jitter = base;
        for _ in 0..=JITTER_ESCALATIONS {
            let mut m = cov.matrix().clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                return Ok(SpdFactor { chol, jitter });
            }
            jitter *= 10.0;
        }
    }
    Err(Error::NotPositiveDefinite {
        context: format!("Cholesky failed on {n}x{n} matrix after jitter escalation"),
    })
}

/// Draws `mean + F z` with `z` standard normal. An all-zero covariance
/// returns the mean unchanged.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &CovarianceMatrix,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if mean.len() != cov.dim() {
        return Err(Error::dims("sample_gaussian", cov.dim(), mean.len()));
    }
    if cov.is_zero() {
        return Ok(mean.clone());
    }
    let factor = cov.factor()?;
    let z = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok(mean + factor.mul_lower(&z))
}

/// Eigendecomposition with negative-eigenvalue rejection and a relative
/// floor on the spectrum.
fn floored_eigen(m: &DMatrix<f64>, context: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min < -SEMIDEFINITE_TOL * max * m.nrows() as f64 {
        return Err(Error::NotPositiveDefinite {
            context: format!("{context}: eigenvalue range [{min:e}, {max:e}]"),
        });
    }
    let floor = EIGEN_FLOOR * max;
    eig.eigenvalues.apply(|v| *v = v.max(floor));
    Ok(eig)
}

/// Matrix logarithm of an SPD matrix through its eigendecomposition.
pub fn spd_log(m: &CovarianceMatrix) -> Result<DMatrix<f64>> {
    let eig = floored_eigen(m.matrix(), "matrix log")?;
    let logs = eig.eigenvalues.map(f64::ln);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&logs) * eig.eigenvectors.transpose())
}

/// `X^{-1/2}` of an SPD matrix.
pub fn spd_inv_sqrt(m: &CovarianceMatrix) -> Result<DMatrix<f64>> {
    let eig = floored_eigen(m.matrix(), "inverse square root")?;
    let s = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

/// Affine-invariant Riemannian distance `‖log(X^{-1/2} Y X^{-1/2})‖_F`.
pub fn airm_distance(x: &CovarianceMatrix, y: &CovarianceMatrix) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::dims("airm_distance", x.dim(), y.dim()));
    }
    let w = spd_inv_sqrt(x)?;
    let whitened = &w * y.matrix() * &w;
    let whitened = (&whitened + whitened.transpose()) * 0.5;
    let eig = floored_eigen(&whitened, "whitened matrix")?;
    Ok(eig.eigenvalues.iter().map(|l| l.ln().powi(2)).sum::<f64>().sqrt())
}
