//! BLUE / 3D-VAR analysis and the iterative covariance-tuning schemes.
//!
//! Every scheme reuses the same observation vector `y` across iterations.
//! Each step records the linear operator it applied ([`StepOperator`]) so
//! that exact error covariances can be propagated alongside
//! (see [`crate::tracker`]).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::spd::CovarianceMatrix;

/// Linear observation operator `H` (`obs_dim x state_dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationOperator {
    matrix: DMatrix<f64>,
}

impl ObservationOperator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::InvalidParameter(
                "observation operator must have at least one row and one column".into(),
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "observation operator has non-finite entries".into(),
            ));
        }
        Ok(Self { matrix })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn obs_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::dims("observation operator", self.state_dim(), x.len()));
        }
        Ok(&self.matrix * x)
    }
}

/// Background, observations, assumed covariances and operator of a single
/// analysis problem.
#[derive(Clone, Debug)]
pub struct AssimilationProblem {
    pub background: DVector<f64>,
    pub observations: DVector<f64>,
    pub background_cov: CovarianceMatrix,
    pub obs_cov: CovarianceMatrix,
    pub operator: ObservationOperator,
}

impl AssimilationProblem {
    pub fn new(
        background: DVector<f64>,
        observations: DVector<f64>,
        background_cov: CovarianceMatrix,
        obs_cov: CovarianceMatrix,
        operator: ObservationOperator,
    ) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::InvalidParameter("observation vector is empty".into()));
        }
        let (m, n) = (operator.obs_dim(), operator.state_dim());
        if background.len() != n {
            return Err(Error::dims("background state", n, background.len()));
        }
        if observations.len() != m {
            return Err(Error::dims("observation vector", m, observations.len()));
        }
        if background_cov.dim() != n {
            return Err(Error::dims("background covariance", n, background_cov.dim()));
        }
        if obs_cov.dim() != m {
            return Err(Error::dims("observation covariance", m, obs_cov.dim()));
        }
        Ok(Self {
            background,
            observations,
            background_cov,
            obs_cov,
            operator,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.operator.state_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.operator.obs_dim()
    }
}

fn check_gain_dims(b: &CovarianceMatrix, r: &CovarianceMatrix, h: &ObservationOperator) -> Result<()> {
    if b.dim() != h.state_dim() {
        return Err(Error::dims("background covariance", h.state_dim(), b.dim()));
    }
    if r.dim() != h.obs_dim() {
        return Err(Error::dims("observation covariance", h.obs_dim(), r.dim()));
    }
    Ok(())
}

/// `K = B Hᵀ (H B Hᵀ + R)⁻¹`, through a factorized symmetric solve.
pub fn kalman_gain(b: &CovarianceMatrix, r: &CovarianceMatrix, h: &ObservationOperator) -> Result<DMatrix<f64>> {
    check_gain_dims(b, r, h)?;
    let hb = h.matrix() * b.matrix();
    let innovation_cov = CovarianceMatrix::from_symmetrized(&hb * h.matrix().transpose() + r.matrix())?;
    let factor = innovation_cov.factor().map_err(|_| Error::NotPositiveDefinite {
        context: "innovation covariance H B Hᵀ + R is singular".into(),
    })?;
    Ok(factor.solve(&hb).transpose())
}

/// `I - K H`.
fn residual_operator(k: &DMatrix<f64>, h: &ObservationOperator) -> DMatrix<f64> {
    let n = h.state_dim();
    DMatrix::identity(n, n) - k * h.matrix()
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub state: DVector<f64>,
    /// Assumed posterior covariance `(I - K H) B_A`.
    pub covariance: CovarianceMatrix,
    pub gain: DMatrix<f64>,
}

/// One-shot BLUE: `x_a = x_b + K (y - H x_b)`, `A_A = (I - K H) B_A`.
pub fn blue_analysis(p: &AssimilationProblem) -> Result<Analysis> {
    let gain = kalman_gain(&p.background_cov, &p.obs_cov, &p.operator)?;
    let innovation = &p.observations - p.operator.matrix() * &p.background;
    let state = &p.background + &gain * innovation;
    let covariance =
        CovarianceMatrix::from_symmetrized(residual_operator(&gain, &p.operator) * p.background_cov.matrix())?;
    Ok(Analysis { state, covariance, gain })
}

/// 3D-VAR cost `½‖x - x_b‖²_{B⁻¹} + ½‖y - Hx‖²_{R⁻¹}`.
pub fn variational_cost(p: &AssimilationProblem, x: &DVector<f64>) -> Result<f64> {
    if x.len() != p.state_dim() {
        return Err(Error::dims("variational_cost state", p.state_dim(), x.len()));
    }
    let d = x - &p.background;
    let e = &p.observations - p.operator.matrix() * x;
    let jb = d.dot(&p.background_cov.factor()?.solve_vector(&d));
    let jo = e.dot(&p.obs_cov.factor()?.solve_vector(&e));
    Ok(0.5 * (jb + jo))
}

/// Exact analysis-error covariance of a one-shot analysis whose gain was
/// computed from the assumed `B_A` while the true background error
/// covariance is `B_E`.
pub fn posterior_exact_oneshot(
    b_exact: &CovarianceMatrix,
    b_assumed: &CovarianceMatrix,
    r: &CovarianceMatrix,
    h: &ObservationOperator,
) -> Result<CovarianceMatrix> {
    if b_exact.dim() != b_assumed.dim() {
        return Err(Error::dims("exact background covariance", b_assumed.dim(), b_exact.dim()));
    }
    let k = kalman_gain(b_assumed, r, h)?;
    let ikh = residual_operator(&k, h);
    let a = &ikh * b_exact.matrix() * ikh.transpose() + &k * r.matrix() * k.transpose();
    CovarianceMatrix::from_symmetrized(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Single BLUE analysis.
    ThreeDVar,
    Naive,
    Cute,
    Pub,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ThreeDVar, Method::Naive, Method::Cute, Method::Pub];

    pub fn name(&self) -> &'static str {
        match self {
            Method::ThreeDVar => "3dvar",
            Method::Naive => "naive",
            Method::Cute => "cute",
            Method::Pub => "pub",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "3dvar" | "3d-var" | "threedvar" => Ok(Method::ThreeDVar),
            "naive" => Ok(Method::Naive),
            "cute" => Ok(Method::Cute),
            "pub" => Ok(Method::Pub),
            other => Err(Error::InvalidParameter(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TuningConfig {
    pub method: Method,
    /// Trace blending coefficient; 0 keeps `Tr(B_A,n)` constant.
    pub alpha: f64,
    pub max_iters: usize,
    /// Stop once the relative change of the innovation norm drops below
    /// this value. `None` runs exactly `max_iters` steps.
    pub innovation_rel_tol: Option<f64>,
}

impl TuningConfig {
    pub fn new(method: Method, alpha: f64, max_iters: usize) -> Result<Self> {
        let cfg = Self {
            method,
            alpha,
            max_iters,
            innovation_rel_tol: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be positive".into()));
        }
        if let Some(tol) = self.innovation_rel_tol {
            if !(tol >= 0.0) {
                return Err(Error::InvalidParameter(format!("innovation tolerance must be non-negative, got {tol}")));
            }
        }
        Ok(())
    }
}

/// Loop state of an iterative scheme at iteration `n`.
#[derive(Clone, Debug)]
pub struct IterativeState {
    pub iteration: usize,
    /// `x_b,n` (equal to the analysis `x_a,n-1` for `n >= 1`).
    pub background: DVector<f64>,
    /// Assumed background covariance `B_A,n`.
    pub background_cov: CovarianceMatrix,
    /// Assumed `Cov(ε_b,n, ε_y)`, `state_dim x obs_dim`.
    pub cross_cov: DMatrix<f64>,
    /// `‖y - H x_b,n‖₂`.
    pub innovation_norm: f64,
}

impl IterativeState {
    pub fn initial(p: &AssimilationProblem) -> Self {
        let innovation = &p.observations - p.operator.matrix() * &p.background;
        Self {
            iteration: 0,
            background: p.background.clone(),
            background_cov: p.background_cov.clone(),
            cross_cov: DMatrix::zeros(p.state_dim(), p.obs_dim()),
            innovation_norm: innovation.norm(),
        }
    }
}

/// Linear map applied by one iteration.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOperator {
    /// Gain `K_n`: `x_b,n+1 = x_b,n + K_n (y - H x_b,n)` (3D-VAR, naive, CUTE).
    Gain(DMatrix<f64>),
    /// Extended-space estimator `G_n`: `x_b,n+1 = G_n (x_b,n; y)` (PUB).
    Extended(DMatrix<f64>),
}

impl StepOperator {
    pub fn apply(&self, background: &DVector<f64>, y: &DVector<f64>, h: &ObservationOperator) -> DVector<f64> {
        match self {
            StepOperator::Gain(k) => background + k * (y - h.matrix() * background),
            StepOperator::Extended(g) => {
                let n = background.len();
                g.columns(0, n) * background + g.columns(n, y.len()) * y
            }
        }
    }
}

/// Result of a single iteration.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: IterativeState,
    /// Assumed posterior `A_A,n` before any trace rescaling.
    pub assumed_posterior: CovarianceMatrix,
    pub operator: StepOperator,
}

fn check_step_dims(s: &IterativeState, y: &DVector<f64>, r: &CovarianceMatrix, h: &ObservationOperator) -> Result<()> {
    if y.is_empty() {
        return Err(Error::InvalidParameter("observation vector is empty".into()));
    }
    if y.len() != h.obs_dim() {
        return Err(Error::dims("observation vector", h.obs_dim(), y.len()));
    }
    if s.background.len() != h.state_dim() {
        return Err(Error::dims("background state", h.state_dim(), s.background.len()));
    }
    if s.cross_cov.shape() != (h.state_dim(), h.obs_dim()) {
        return Err(Error::dims(
            "cross covariance",
            format!("{}x{}", h.state_dim(), h.obs_dim()),
            format!("{}x{}", s.cross_cov.nrows(), s.cross_cov.ncols()),
        ));
    }
    check_gain_dims(&s.background_cov, r, h)
}

/// `[((1-α) Tr(B_n) + α Tr(A_n)) / Tr(A_n)] A_n`.
fn rescale_trace(
    previous: &CovarianceMatrix,
    posterior: &CovarianceMatrix,
    alpha: f64,
    iteration: usize,
) -> Result<CovarianceMatrix> {
    let tr_a = posterior.trace();
    if !(tr_a > 0.0) {
        return Err(Error::DegeneratePosterior { iteration, trace: tr_a });
    }
    let factor = ((1.0 - alpha) * previous.trace() + alpha * tr_a) / tr_a;
    Ok(posterior.scaled(factor))
}

fn next_state(
    s: &IterativeState,
    background: DVector<f64>,
    background_cov: CovarianceMatrix,
    cross_cov: DMatrix<f64>,
    y: &DVector<f64>,
    h: &ObservationOperator,
) -> IterativeState {
    let innovation_norm = (y - h.matrix() * &background).norm();
    IterativeState {
        iteration: s.iteration + 1,
        background,
        background_cov,
        cross_cov,
        innovation_norm,
    }
}

/// Naive reuse of the observations: `B_A,n+1 = (I - K_n H) B_A,n`, the
/// cross covariance is ignored.
pub fn naive_step(
    s: &IterativeState,
    y: &DVector<f64>,
    r: &CovarianceMatrix,
    h: &ObservationOperator,
) -> Result<StepOutcome> {
    check_step_dims(s, y, r, h)?;
    let k = kalman_gain(&s.background_cov, r, h)?;
    let ikh = residual_operator(&k, h);
    let posterior = CovarianceMatrix::from_symmetrized(&ikh * s.background_cov.matrix())?;
    let background = &s.background + &k * (y - h.matrix() * &s.background);
    let state = next_state(s, background, posterior.clone(), s.cross_cov.clone(), y, h);
    Ok(StepOutcome {
        state,
        assumed_posterior: posterior,
        operator: StepOperator::Gain(k),
    })
}

/// CUTE iteration: BLUE with the current `B_A,n`, cross-covariance
/// recursion, assumed posterior including the cross terms, and trace
/// rescaling.
pub fn cute_step(
    s: &IterativeState,
    y: &DVector<f64>,
    r: &CovarianceMatrix,
    h: &ObservationOperator,
    alpha: f64,
) -> Result<StepOutcome> {
    check_step_dims(s, y, r, h)?;
    let k = kalman_gain(&s.background_cov, r, h)?;
    let ikh = residual_operator(&k, h);
    let background = &s.background + &k * (y - h.matrix() * &s.background);

    let ikh_cross = &ikh * &s.cross_cov;
    let cross_cov = &ikh_cross + &k * r.matrix();
    let cross_term = &ikh_cross * k.transpose();
    let posterior = CovarianceMatrix::from_symmetrized(
        &ikh * s.background_cov.matrix() + &cross_term + cross_term.transpose(),
    )?;
    let background_cov = rescale_trace(&s.background_cov, &posterior, alpha, s.iteration)?;
    let state = next_state(s, background, background_cov, cross_cov, y, h);
    Ok(StepOutcome {
        state,
        assumed_posterior: posterior,
        operator: StepOperator::Gain(k),
    })
}

/// Extended covariance `[[B, Cov], [Covᵀ, R]]`.
pub fn extended_covariance(b: &DMatrix<f64>, cross: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (b.nrows(), r.nrows());
    let mut c = DMatrix::zeros(n + m, n + m);
    c.view_mut((0, 0), (n, n)).copy_from(b);
    c.view_mut((0, n), (n, m)).copy_from(cross);
    c.view_mut((n, 0), (m, n)).copy_from(&cross.transpose());
    c.view_mut((n, n), (m, m)).copy_from(r);
    c
}

/// `H̃ = [I; H]`.
pub fn extended_operator(h: &ObservationOperator) -> DMatrix<f64> {
    let (m, n) = (h.obs_dim(), h.state_dim());
    let mut ht = DMatrix::zeros(n + m, n);
    ht.view_mut((0, 0), (n, n)).fill_with_identity();
    ht.view_mut((n, 0), (m, n)).copy_from(h.matrix());
    ht
}

/// PUB iteration: BLUE in the stacked (background, observation) space with
/// the cross covariance carried in the extended matrix; only the background
/// block is updated.
pub fn pub_step(
    s: &IterativeState,
    y: &DVector<f64>,
    r: &CovarianceMatrix,
    h: &ObservationOperator,
    alpha: f64,
) -> Result<StepOutcome> {
    check_step_dims(s, y, r, h)?;
    let n = h.state_dim();
    let singular = |_| Error::SingularExtendedCovariance { iteration: s.iteration };

    let c = CovarianceMatrix::from_symmetrized(extended_covariance(
        s.background_cov.matrix(),
        &s.cross_cov,
        r.matrix(),
    ))?;
    let ht = extended_operator(h);
    // C⁻¹ H̃, so that H̃ᵀ C⁻¹ = (C⁻¹ H̃)ᵀ
    let c_inv_ht = c.factor().map_err(singular)?.solve(&ht);
    let normal = CovarianceMatrix::from_symmetrized(ht.transpose() * &c_inv_ht)?;
    let posterior_raw = normal.factor().map_err(singular)?.solve(&DMatrix::identity(n, n));
    let posterior = CovarianceMatrix::from_symmetrized(posterior_raw)?;
    let g = posterior.matrix() * c_inv_ht.transpose();

    let background = g.columns(0, n) * &s.background + g.columns(n, y.len()) * y;
    let cross_cov = g.columns(0, n) * &s.cross_cov + g.columns(n, y.len()) * r.matrix();
    let background_cov = rescale_trace(&s.background_cov, &posterior, alpha, s.iteration)?;
    let state = next_state(s, background, background_cov, cross_cov, y, h);
    Ok(StepOutcome {
        state,
        assumed_posterior: posterior,
        operator: StepOperator::Extended(g),
    })
}

/// Applies one iteration of `method`.
pub fn step(
    method: Method,
    s: &IterativeState,
    y: &DVector<f64>,
    r: &CovarianceMatrix,
    h: &ObservationOperator,
    alpha: f64,
) -> Result<StepOutcome> {
    match method {
        Method::ThreeDVar | Method::Naive => naive_step(s, y, r, h),
        Method::Cute => cute_step(s, y, r, h, alpha),
        Method::Pub => pub_step(s, y, r, h, alpha),
    }
}

/// Full record of an iterative run.
#[derive(Clone, Debug)]
pub struct IterativeRun {
    pub method: Method,
    pub initial: IterativeState,
    /// States after each iteration, `states[k].iteration == k + 1`.
    pub states: Vec<IterativeState>,
    pub assumed_posteriors: Vec<CovarianceMatrix>,
    pub operators: Vec<StepOperator>,
}

impl IterativeRun {
    pub fn last(&self) -> &IterativeState {
        self.states.last().unwrap_or(&self.initial)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn innovation_converged(previous: f64, current: f64, tol: Option<f64>) -> bool {
    match tol {
        Some(tol) if previous > 0.0 => ((previous - current) / previous).abs() < tol,
        Some(_) => true,
        None => false,
    }
}

/// Runs the configured scheme. `ThreeDVar` performs exactly one analysis.
pub fn run_iterative(p: &AssimilationProblem, cfg: &TuningConfig) -> Result<IterativeRun> {
    cfg.validate()?;
    let iterations = if cfg.method == Method::ThreeDVar { 1 } else { cfg.max_iters };
    let initial = IterativeState::initial(p);
    let mut run = IterativeRun {
        method: cfg.method,
        initial: initial.clone(),
        states: Vec::with_capacity(iterations),
        assumed_posteriors: Vec::with_capacity(iterations),
        operators: Vec::with_capacity(iterations),
    };
    let mut current = initial;
    for _ in 0..iterations {
        let outcome = step(cfg.method, &current, &p.observations, &p.obs_cov, &p.operator, cfg.alpha)?;
        let stop = innovation_converged(
            current.innovation_norm,
            outcome.state.innovation_norm,
            cfg.innovation_rel_tol,
        );
        current = outcome.state.clone();
        run.states.push(outcome.state);
        run.assumed_posteriors.push(outcome.assumed_posterior);
        run.operators.push(outcome.operator);
        if stop {
            break;
        }
    }
    Ok(run)
}

/// Covariance-side run: the operators and assumed covariances of a scheme
/// do not depend on `x_b` or `y`, so they can be computed once and applied
/// to many draws with [`apply_operators`].
pub fn covariance_schedule(
    b_assumed: &CovarianceMatrix,
    r: &CovarianceMatrix,
    h: &ObservationOperator,
    cfg: &TuningConfig,
) -> Result<IterativeRun> {
    let problem = AssimilationProblem::new(
        DVector::zeros(h.state_dim()),
        DVector::zeros(h.obs_dim()),
        b_assumed.clone(),
        r.clone(),
        h.clone(),
    )?;
    let fixed = TuningConfig {
        innovation_rel_tol: None,
        ..*cfg
    };
    run_iterative(&problem, &fixed)
}

/// Backgrounds `x_b,1 ..= x_b,N` obtained by applying recorded operators.
pub fn apply_operators(
    operators: &[StepOperator],
    background: &DVector<f64>,
    y: &DVector<f64>,
    h: &ObservationOperator,
) -> Vec<DVector<f64>> {
    let mut x = background.clone();
    operators
        .iter()
        .map(|op| {
            x = op.apply(&x, y, h);
            x.clone()
        })
        .collect()
}
