//! Monte-Carlo twin experiments.
//!
//! A static experiment perturbs a fixed truth with background and
//! observation errors of known (exact) covariance, runs the schemes with a
//! misspecified assumed covariance and measures errors and correlation
//! calibration. A dynamic chain repeats the analysis every few thousand
//! solver steps, forecasting each analysis with the shallow-water model.
//!
//! Gains and covariances do not depend on the draws, so every scheme's
//! operator sequence is computed once and only applied per trial. Trials use
//! independent ChaCha20 streams `(seed, trial)`; aggregation runs in trial
//! order, so results do not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::assimilation::{
    apply_operators, covariance_schedule, kalman_gain, IterativeRun, Method, ObservationOperator, StepOperator,
    TuningConfig,
};
use crate::error::{Error, Result};
use crate::shallow_water::{init_cylinder, Cylinder, ReferenceTrajectory, SwConfig, Window};
use crate::spd::{
    build_correlation_matrix, covariance_from_correlation, grid_coordinates, sample_gaussian, CorrelationKernel,
    CovarianceMatrix, DiagonalScale, KernelKind, Point,
};
use crate::tracker::{airm_between_correlations, calibrate_correlation, correlation_mismatch, track_operators, ExactTrace};

/// Relative floor applied to state-dependent variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseModel {
    /// Constant standard deviations (model units).
    StateIndependent { sigma_b: f64, sigma_o: f64 },
    /// Standard deviations proportional to the true values: `mu_b · x_t`
    /// for the background and `mu_o · H x_t` for the observations.
    StateDependent { mu_b: f64, mu_o: f64 },
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::StateIndependent {
            sigma_b: 0.1,
            sigma_o: 0.01,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = match *self {
            NoiseModel::StateIndependent { sigma_b, sigma_o } => (sigma_b, sigma_o),
            NoiseModel::StateDependent { mu_b, mu_o } => (mu_b, mu_o),
        };
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise amplitudes must be positive, got {a} and {b}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CorrelationModel {
    Identity,
    Kernel(CorrelationKernel),
}

impl CorrelationModel {
    pub fn kernel(kind: KernelKind, length_scale: f64) -> Result<Self> {
        Ok(CorrelationModel::Kernel(CorrelationKernel::new(kind, length_scale)?))
    }

    fn matrix(&self, coords: &[Point]) -> Result<CovarianceMatrix> {
        match self {
            CorrelationModel::Identity => Ok(CovarianceMatrix::identity(coords.len())),
            CorrelationModel::Kernel(k) => build_correlation_matrix(k, coords),
        }
    }
}

/// Exact error statistics of a twin experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub model: NoiseModel,
    /// Correlation of the background error inside each velocity block.
    pub background: CorrelationModel,
    /// Correlation of the observation error; kernels use the observation
    /// index as a 1-D coordinate.
    pub observation: CorrelationModel,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            model: NoiseModel::default(),
            background: CorrelationModel::Kernel(CorrelationKernel::new(KernelKind::Balgovind, 2.0).expect("valid")),
            observation: CorrelationModel::Identity,
        }
    }
}

/// Assumed initial background covariance: kernel correlation in each
/// velocity block with a uniform standard deviation of
/// `std_ratio · sqrt(Tr(R_E) / m)`, i.e. relative to the observation-error
/// level. The default (1) makes the prior as confident as the observations,
/// which underestimates the background error whenever `σ_b > σ_o`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssumedPrior {
    pub kernel: CorrelationKernel,
    pub std_ratio: f64,
}

impl Default for AssumedPrior {
    fn default() -> Self {
        Self {
            kernel: CorrelationKernel::new(KernelKind::Exponential, 3.0).expect("valid"),
            std_ratio: 1.0,
        }
    }
}

/// Block-diagonal `(u, v)` correlation over the window grid.
pub fn state_correlation(model: &CorrelationModel, window: &Window) -> Result<CovarianceMatrix> {
    let block = model.matrix(&grid_coordinates(window.rows, window.cols))?;
    Ok(CovarianceMatrix::block_diagonal(&[&block, &block]))
}

fn observation_correlation(model: &CorrelationModel, obs_dim: usize) -> Result<CovarianceMatrix> {
    let coords: Vec<Point> = (0..obs_dim).map(|j| [j as f64, 0.0]).collect();
    model.matrix(&coords)
}

/// `(mu · value)²`, floored at `VARIANCE_FLOOR` times the largest one.
pub fn state_dependent_variances(mu: f64, values: &DVector<f64>) -> Result<DVector<f64>> {
    let mut d = values.map(|v| (mu * v).powi(2));
    let max = d.max();
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::DegenerateVariance { index: 0, value: max });
    }
    let floor = VARIANCE_FLOOR * max;
    d.apply(|v| *v = v.max(floor));
    Ok(d)
}

/// Exact `(B_E, R_E)`. Fails unless `Tr(B_E) > Tr(R_E)`.
pub fn build_exact_covariances(
    noise: &NoiseConfig,
    window: &Window,
    truth: &DVector<f64>,
    h: &ObservationOperator,
) -> Result<(CovarianceMatrix, CovarianceMatrix)> {
    noise.model.validate()?;
    let n = window.state_dim();
    if truth.len() != n || h.state_dim() != n {
        return Err(Error::dims("twin truth / operator", n, truth.len().max(h.state_dim())));
    }
    let cor_b = state_correlation(&noise.background, window)?;
    let cor_r = observation_correlation(&noise.observation, h.obs_dim())?;
    let (b, r) = match noise.model {
        NoiseModel::StateIndependent { sigma_b, sigma_o } => (cor_b.scaled(sigma_b * sigma_b), cor_r.scaled(sigma_o * sigma_o)),
        NoiseModel::StateDependent { mu_b, mu_o } => {
            let db = DiagonalScale::new(state_dependent_variances(mu_b, truth)?)?;
            let dr = DiagonalScale::new(state_dependent_variances(mu_o, &h.apply(truth)?)?)?;
            (covariance_from_correlation(&db, &cor_b)?, covariance_from_correlation(&dr, &cor_r)?)
        }
    };
    if !(b.trace() > r.trace()) {
        return Err(Error::InvalidParameter(format!(
            "background errors must dominate: Tr(B_E) = {:e} <= Tr(R_E) = {:e}",
            b.trace(),
            r.trace()
        )));
    }
    Ok((b, r))
}

/// `(B_A,0, R_A)`; `R_A` is the identity scaled by the mean exact
/// observation variance.
pub fn build_assumed_covariances(
    assumed: &AssumedPrior,
    window: &Window,
    r_exact: &CovarianceMatrix,
) -> Result<(CovarianceMatrix, CovarianceMatrix)> {
    if !(assumed.std_ratio > 0.0 && assumed.std_ratio.is_finite()) {
        return Err(Error::InvalidParameter(format!("std_ratio must be positive, got {}", assumed.std_ratio)));
    }
    let cor = state_correlation(&CorrelationModel::Kernel(assumed.kernel), window)?;
    let obs_var = r_exact.trace() / r_exact.dim() as f64;
    let r = CovarianceMatrix::scaled_identity(r_exact.dim(), obs_var);
    Ok((cor.scaled(assumed.std_ratio.powi(2) * obs_var), r))
}

/// Solver time step of the twin scenarios (Courant number 0.0025 with
/// `g = 1`, unit spacing and unit depth). Scenario times are measured as
/// 1e4 model time units per second of the reference setup, so the released
/// front has crossed the whole observed window when the static truth is
/// taken, and forward-Euler growth of grid-scale waves stays around 7x over
/// the 76000 steps of a ten-cycle chain.
pub const SCENARIO_DT: f64 = 2.5e-3;

/// Shallow-water setup that produces the truth of the twin experiments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthConfig {
    pub sw: SwConfig,
    pub cylinder: Cylinder,
    /// Solver steps from the release to the truth snapshot.
    pub steps: usize,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            sw: SwConfig {
                dt: SCENARIO_DT,
                ..SwConfig::default()
            },
            cylinder: Cylinder::default(),
            steps: 6000,
        }
    }
}

/// Window state of the cylinder release after `truth.steps` solver steps.
pub fn shallow_water_truth(truth: &TruthConfig, window: &Window) -> Result<DVector<f64>> {
    let s0 = init_cylinder(&truth.sw, &truth.cylinder)?;
    let s = crate::shallow_water::integrate(&s0, &truth.sw, truth.steps)?;
    crate::shallow_water::extract_subdomain(&s, window)
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Mean and sample standard deviation, summed in slice order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self::default();
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticConfig {
    pub noise: NoiseConfig,
    pub assumed: AssumedPrior,
    pub window: Window,
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub iterations: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for StaticConfig {
    fn default() -> Self {
        Self {
            noise: NoiseConfig::default(),
            assumed: AssumedPrior::default(),
            window: Window::default(),
            methods: vec![Method::Cute, Method::Pub],
            alpha: 0.0,
            iterations: 10,
            trials: 200,
            seed: 1,
        }
    }
}

/// Covariance-side plan of one scheme.
#[derive(Clone, Debug)]
pub struct MethodPlan {
    pub method: Method,
    pub schedule: IterativeRun,
    pub exact: ExactTrace,
}

/// Everything of a static experiment that does not depend on the draws.
#[derive(Clone, Debug)]
pub struct StaticExperiment {
    pub config: StaticConfig,
    pub truth: DVector<f64>,
    pub operator: ObservationOperator,
    pub b_exact: CovarianceMatrix,
    pub r_exact: CovarianceMatrix,
    pub b_assumed: CovarianceMatrix,
    pub r_assumed: CovarianceMatrix,
    pub plans: Vec<MethodPlan>,
    /// One-shot analysis with `B_A,0`.
    pub baseline: StepOperator,
    /// One-shot analysis with the exact `B_E` and `R_E`.
    pub optimal: StepOperator,
    coords: Vec<Point>,
}

/// Per-trial outcome of one scheme; index `k` is iteration `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodTrial {
    pub errors: Vec<f64>,
    pub innovations: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub background_error: f64,
    pub background_innovation: f64,
    pub methods: Vec<MethodTrial>,
    pub baseline_error: f64,
    pub optimal_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub error: Stats,
    pub innovation: f64,
    /// `Tr(B_A,n)` after the iteration.
    pub trace_assumed: f64,
    /// `Tr(B_E,n)` after the iteration.
    pub trace_exact: f64,
    /// u-field calibration-curve mismatch between assumed and exact.
    pub mismatch: f64,
    /// AIRM between assumed and exact correlations of the full state.
    pub airm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub iterations: Vec<IterationStats>,
}

impl MethodSummary {
    pub fn last(&self) -> &IterationStats {
        self.iterations.last().expect("at least one iteration")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticSummary {
    pub trials: usize,
    pub background_error: Stats,
    pub background_innovation: f64,
    pub initial_mismatch: f64,
    pub initial_airm: f64,
    pub methods: Vec<MethodSummary>,
    pub baseline_error: Stats,
    pub optimal_error: Stats,
}

impl StaticSummary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

impl StaticExperiment {
    pub fn prepare(config: StaticConfig, truth: DVector<f64>, operator: ObservationOperator) -> Result<Self> {
        if config.methods.is_empty() {
            return Err(Error::InvalidParameter("no methods selected".into()));
        }
        let tuning = TuningConfig::new(Method::Naive, config.alpha, config.iterations)?;
        let (b_exact, r_exact) = build_exact_covariances(&config.noise, &config.window, &truth, &operator)?;
        let (b_assumed, r_assumed) = build_assumed_covariances(&config.assumed, &config.window, &r_exact)?;
        let plans = config
            .methods
            .iter()
            .map(|&method| {
                let cfg = TuningConfig { method, ..tuning };
                let schedule = covariance_schedule(&b_assumed, &r_assumed, &operator, &cfg)?;
                let exact = track_operators(&schedule.operators, &b_exact, &r_exact, &operator)?;
                Ok(MethodPlan { method, schedule, exact })
            })
            .collect::<Result<Vec<_>>>()?;
        let baseline = StepOperator::Gain(kalman_gain(&b_assumed, &r_assumed, &operator)?);
        let optimal = StepOperator::Gain(kalman_gain(&b_exact, &r_exact, &operator)?);
        let coords = grid_coordinates(config.window.rows, config.window.cols);
        Ok(Self {
            config,
            truth,
            operator,
            b_exact,
            r_exact,
            b_assumed,
            r_assumed,
            plans,
            baseline,
            optimal,
            coords,
        })
    }

    /// `(x_b, y)` of a trial.
    pub fn draw(&self, trial: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        let mut rng = trial_rng(self.config.seed, trial);
        let background = sample_gaussian(&self.truth, &self.b_exact, &mut rng)?;
        let clean = self.operator.apply(&self.truth)?;
        let observations = sample_gaussian(&clean, &self.r_exact, &mut rng)?;
        Ok((background, observations))
    }

    pub fn run_static_trial(&self, trial: usize) -> Result<TrialResult> {
        let (x_b, y) = self.draw(trial).map_err(|e| Error::Trial {
            trial,
            source: Box::new(e),
        })?;
        Ok(self.evaluate(trial, &x_b, &y))
    }

    /// Metrics of a trial with explicit draws.
    pub fn evaluate(&self, trial: usize, x_b: &DVector<f64>, y: &DVector<f64>) -> TrialResult {
        let h = &self.operator;
        let innovation = |x: &DVector<f64>| (y - h.matrix() * x).norm();
        let error = |x: &DVector<f64>| (x - &self.truth).norm();
        let methods = self
            .plans
            .iter()
            .map(|plan| {
                let xs = apply_operators(&plan.schedule.operators, x_b, y, h);
                MethodTrial {
                    errors: xs.iter().map(error).collect(),
                    innovations: xs.iter().map(innovation).collect(),
                }
            })
            .collect();
        TrialResult {
            trial,
            background_error: error(x_b),
            background_innovation: innovation(x_b),
            methods,
            baseline_error: error(&self.baseline.apply(x_b, y, h)),
            optimal_error: error(&self.optimal.apply(x_b, y, h)),
        }
    }

    /// Calibration mismatch (u block) and correlation AIRM between an
    /// assumed and an exact covariance.
    pub fn correlation_metrics(&self, assumed: &CovarianceMatrix, exact: &CovarianceMatrix) -> Result<(f64, f64)> {
        let ca = calibrate_correlation(assumed, &self.coords, 0)?;
        let ce = calibrate_correlation(exact, &self.coords, 0)?;
        Ok((correlation_mismatch(&ca, &ce)?, airm_between_correlations(assumed, exact)?))
    }

    pub fn run_monte_carlo(&self) -> Result<StaticSummary> {
        let trials = self.config.trials;
        if trials < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 trials, got {trials}")));
        }
        let results: Vec<Result<TrialResult>> = (0..trials).into_par_iter().map(|t| self.run_static_trial(t)).collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        self.aggregate(&results)
    }

    pub fn aggregate(&self, results: &[TrialResult]) -> Result<StaticSummary> {
        let (initial_mismatch, initial_airm) = self.correlation_metrics(&self.b_assumed, &self.b_exact)?;
        let methods = self
            .plans
            .iter()
            .enumerate()
            .map(|(m, plan)| {
                let iterations = (0..plan.schedule.len())
                    .map(|k| {
                        let assumed = &plan.schedule.states[k].background_cov;
                        let exact = &plan.exact.history()[k + 1].0;
                        let (mismatch, airm) = self.correlation_metrics(assumed, exact)?;
                        Ok(IterationStats {
                            iteration: k + 1,
                            error: Stats::of(results.iter().map(|r| r.methods[m].errors[k])),
                            innovation: Stats::of(results.iter().map(|r| r.methods[m].innovations[k])).mean,
                            trace_assumed: assumed.trace(),
                            trace_exact: exact.trace(),
                            mismatch,
                            airm,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(MethodSummary {
                    method: plan.method,
                    iterations,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StaticSummary {
            trials: results.len(),
            background_error: Stats::of(results.iter().map(|r| r.background_error)),
            background_innovation: Stats::of(results.iter().map(|r| r.background_innovation)).mean,
            initial_mismatch,
            initial_airm,
            methods,
            baseline_error: Stats::of(results.iter().map(|r| r.baseline_error)),
            optimal_error: Stats::of(results.iter().map(|r| r.optimal_error)),
        })
    }
}

/// When the iterative schemes replace 3D-VAR in a chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    FirstStepOnly,
    EveryStep,
    Never,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "firststeponly" | "first" => Ok(Placement::FirstStepOnly),
            "everystep" | "every" => Ok(Placement::EveryStep),
            "never" => Ok(Placement::Never),
            other => Err(Error::InvalidParameter(format!("unknown placement '{other}'"))),
        }
    }
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Placement::FirstStepOnly => "first-step-only",
            Placement::EveryStep => "every-step",
            Placement::Never => "never",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicChainConfig {
    pub sw: SwConfig,
    pub cylinder: Cylinder,
    pub window: Window,
    /// Solver steps from the release to the first analysis.
    pub first_analysis_steps: usize,
    /// Solver steps between analyses.
    pub interval_steps: usize,
    pub cycles: usize,
    pub placement: Placement,
    pub inner_iterations: usize,
    pub alpha: f64,
    pub sigma_b: f64,
    /// `sigma_b / sigma_o`.
    pub noise_ratio: f64,
    pub background: CorrelationModel,
    pub assumed: AssumedPrior,
    pub trials: usize,
    pub seed: u64,
}

impl Default for DynamicChainConfig {
    fn default() -> Self {
        Self {
            sw: TruthConfig::default().sw,
            cylinder: Cylinder::default(),
            window: Window::default(),
            first_analysis_steps: 4000,
            interval_steps: 8000,
            cycles: 10,
            placement: Placement::FirstStepOnly,
            inner_iterations: 10,
            alpha: 0.0,
            sigma_b: 0.1,
            noise_ratio: 10.0,
            background: NoiseConfig::default().background,
            assumed: AssumedPrior::default(),
            trials: 100,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CycleStats {
    pub cycle: usize,
    pub time: f64,
    pub three_dvar: Stats,
    pub cute: Stats,
    pub publ: Stats,
}

/// Precomputed reference trajectory and operator schedules of a chain.
#[derive(Clone, Debug)]
pub struct DynamicExperiment {
    pub config: DynamicChainConfig,
    pub operator: ObservationOperator,
    pub reference: ReferenceTrajectory,
    pub b_exact: CovarianceMatrix,
    pub r_exact: CovarianceMatrix,
    /// Analysis steps (solver step index of each cycle).
    pub cycle_steps: Vec<usize>,
    three_dvar: Vec<StepOperator>,
    cute: Vec<StepOperator>,
    publ: Vec<StepOperator>,
}

impl DynamicExperiment {
    pub fn prepare(config: DynamicChainConfig, operator: ObservationOperator) -> Result<Self> {
        if config.cycles == 0 {
            return Err(Error::InvalidParameter("chain needs at least one cycle".into()));
        }
        if !(config.sigma_b > 0.0 && config.noise_ratio > 0.0) {
            return Err(Error::InvalidParameter("sigma_b and noise_ratio must be positive".into()));
        }
        let (first, interval) = (config.first_analysis_steps, config.interval_steps);
        if interval == 0 {
            return Err(Error::InvalidParameter("assimilation interval must be at least one step".into()));
        }
        let cycle_steps: Vec<usize> = (0..config.cycles).map(|k| first + k * interval).collect();
        let total = *cycle_steps.last().expect("non-empty");
        let s0 = init_cylinder(&config.sw, &config.cylinder)?;
        let reference = ReferenceTrajectory::compute(&config.sw, &s0, &config.window, total, &cycle_steps)?;

        let noise = NoiseConfig {
            model: NoiseModel::StateIndependent {
                sigma_b: config.sigma_b,
                sigma_o: config.sigma_b / config.noise_ratio,
            },
            background: config.background,
            observation: CorrelationModel::Identity,
        };
        let truth0 = reference.truth(cycle_steps[0])?;
        let (b_exact, r_exact) = build_exact_covariances(&noise, &config.window, &truth0, &operator)?;
        let (b_assumed, r_assumed) = build_assumed_covariances(&config.assumed, &config.window, &r_exact)?;
        let schedule = |method| -> Result<Vec<StepOperator>> {
            let cfg = TuningConfig::new(method, config.alpha, config.inner_iterations)?;
            Ok(covariance_schedule(&b_assumed, &r_assumed, &operator, &cfg)?.operators)
        };
        Ok(Self {
            three_dvar: schedule(Method::ThreeDVar)?,
            cute: schedule(Method::Cute)?,
            publ: schedule(Method::Pub)?,
            config,
            operator,
            reference,
            b_exact,
            r_exact,
            cycle_steps,
        })
    }

    fn operators_for(&self, method: Method, cycle: usize) -> &[StepOperator] {
        let iterative = match self.config.placement {
            Placement::Never => false,
            Placement::FirstStepOnly => cycle == 0,
            Placement::EveryStep => true,
        };
        match method {
            Method::Cute if iterative => &self.cute,
            Method::Pub if iterative => &self.publ,
            _ => &self.three_dvar,
        }
    }

    /// Analysis errors per cycle for the 3D-VAR, CUTE and PUB chains of one
    /// trial. All chains share the initial background and observations.
    pub fn run_trial(&self, trial: usize) -> Result<Vec<[f64; 3]>> {
        let wrap = |e| Error::Trial { trial, source: Box::new(e) };
        let mut rng = trial_rng(self.config.seed, trial);
        let truths = self
            .cycle_steps
            .iter()
            .map(|&s| self.reference.truth(s))
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        let x_b0 = sample_gaussian(&truths[0], &self.b_exact, &mut rng).map_err(wrap)?;
        let ys = truths
            .iter()
            .map(|t| sample_gaussian(&self.operator.apply(t)?, &self.r_exact, &mut rng))
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;

        let methods = [Method::ThreeDVar, Method::Cute, Method::Pub];
        let mut backgrounds = [x_b0.clone(), x_b0.clone(), x_b0];
        let mut errors = Vec::with_capacity(self.config.cycles);
        let interval = self.config.interval_steps;
        for (k, (&step, truth)) in self.cycle_steps.iter().zip(&truths).enumerate() {
            let mut row = [0.0; 3];
            for (i, &method) in methods.iter().enumerate() {
                let ops = self.operators_for(method, k);
                let analysis = apply_operators(ops, &backgrounds[i], &ys[k], &self.operator)
                    .pop()
                    .expect("non-empty schedule");
                row[i] = (&analysis - truth).norm();
                if k + 1 < self.config.cycles {
                    backgrounds[i] = self
                        .reference
                        .forecast(&analysis, step, interval)
                        .map_err(|e| wrap(Error::Cycle { cycle: k + 1, source: Box::new(e) }))?;
                }
            }
            errors.push(row);
        }
        Ok(errors)
    }

    pub fn run(&self) -> Result<Vec<CycleStats>> {
        let trials = self.config.trials;
        if trials < 1 {
            return Err(Error::InvalidParameter("need at least one trial".into()));
        }
        let results: Vec<Result<Vec<[f64; 3]>>> = (0..trials).into_par_iter().map(|t| self.run_trial(t)).collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(self
            .cycle_steps
            .iter()
            .enumerate()
            .map(|(k, &step)| {
                let col = |i: usize| Stats::of(results.iter().map(move |r| r[k][i]));
                CycleStats {
                    cycle: k + 1,
                    time: step as f64 * self.config.sw.dt,
                    three_dvar: col(0),
                    cute: col(1),
                    publ: col(2),
                }
            })
            .collect())
    }
}

/// Convenience wrapper: prepare and run a dynamic chain.
pub fn run_dynamic_chain(config: DynamicChainConfig, operator: ObservationOperator) -> Result<Vec<CycleStats>> {
    DynamicExperiment::prepare(config, operator)?.run()
}

/// Analysis-error decomposition `(I - K H) ε_b + K ε_y` of a gain step.
pub fn gain_error_decomposition(
    k: &DMatrix<f64>,
    h: &ObservationOperator,
    eps_b: &DVector<f64>,
    eps_y: &DVector<f64>,
) -> DVector<f64> {
    let n = h.state_dim();
    (DMatrix::identity(n, n) - k * h.matrix()) * eps_b + k * eps_y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::{generate_h, BinomialSelectionSpec};
    use approx::assert_relative_eq;

    fn small_window() -> Window {
        Window {
            row0: 0,
            col0: 0,
            rows: 3,
            cols: 3,
        }
    }

    fn small_h() -> ObservationOperator {
        generate_h(&BinomialSelectionSpec {
            state_dim: 18,
            obs_dim: 9,
            p: 0.15,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn identity_kernel_gives_scaled_identity() {
        let noise = NoiseConfig {
            background: CorrelationModel::Identity,
            ..NoiseConfig::default()
        };
        let (b, r) = build_exact_covariances(&noise, &small_window(), &DVector::zeros(18), &small_h()).unwrap();
        assert_eq!(b, CovarianceMatrix::scaled_identity(18, 0.1 * 0.1));
        assert_eq!(r, CovarianceMatrix::scaled_identity(9, 0.01 * 0.01));
    }

    #[test]
    fn exact_covariance_is_block_diagonal() {
        let (b, _) = build_exact_covariances(&NoiseConfig::default(), &small_window(), &DVector::zeros(18), &small_h()).unwrap();
        assert!(b.matrix().view((0, 9), (9, 9)).iter().all(|&v| v == 0.0));
        assert!(b.matrix().view((9, 0), (9, 9)).iter().all(|&v| v == 0.0));
        assert!(b.matrix()[(0, 1)] > 0.0);
    }

    #[test]
    fn state_dependent_variance_formula() {
        let d = state_dependent_variances(0.1, &DVector::from_vec(vec![2.0, 0.0, -1.0])).unwrap();
        assert_relative_eq!(d[0], 0.04, max_relative = 1e-15);
        assert_relative_eq!(d[1], 0.04 * 1e-12, max_relative = 1e-15);
        assert_relative_eq!(d[2], 0.01, max_relative = 1e-15);
        assert!(state_dependent_variances(0.1, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn background_dominance_is_enforced() {
        let noise = NoiseConfig {
            model: NoiseModel::StateIndependent {
                sigma_b: 0.01,
                sigma_o: 0.1,
            },
            ..NoiseConfig::default()
        };
        assert!(build_exact_covariances(&noise, &small_window(), &DVector::zeros(18), &small_h()).is_err());
    }

    fn small_experiment(trials: usize) -> StaticExperiment {
        let cfg = StaticConfig {
            window: small_window(),
            methods: vec![Method::Naive, Method::Cute, Method::Pub],
            trials,
            ..StaticConfig::default()
        };
        let truth = DVector::from_fn(18, |i, _| (i as f64 * 0.3).sin());
        StaticExperiment::prepare(cfg, truth, small_h()).unwrap()
    }

    #[test]
    fn zero_noise_gives_zero_error() {
        let exp = small_experiment(2);
        let y = exp.operator.apply(&exp.truth).unwrap();
        let r = exp.evaluate(0, &exp.truth, &y);
        for m in &r.methods {
            assert!(m.errors.iter().all(|&e| e < 1e-12));
        }
        assert!(r.baseline_error < 1e-12 && r.optimal_error < 1e-12);
    }

    #[test]
    fn first_iteration_is_shared() {
        let exp = small_experiment(2);
        let r = exp.run_static_trial(5).unwrap();
        let e0 = r.methods[0].errors[0];
        for m in &r.methods {
            assert_relative_eq!(m.errors[0], e0, max_relative = 1e-10);
            assert_relative_eq!(m.errors[0], r.baseline_error, max_relative = 1e-10);
        }
    }

    #[test]
    fn error_decomposition() {
        let exp = small_experiment(2);
        let (x_b, y) = exp.draw(4).unwrap();
        let StepOperator::Gain(k) = &exp.baseline else { panic!() };
        let direct = exp.baseline.apply(&x_b, &y, &exp.operator) - &exp.truth;
        let eps_y = &y - exp.operator.apply(&exp.truth).unwrap();
        let decomposed = gain_error_decomposition(k, &exp.operator, &(&x_b - &exp.truth), &eps_y);
        assert!((direct - decomposed).amax() < 1e-10);
    }

    #[test]
    fn trials_are_reproducible_and_distinct() {
        let exp = small_experiment(2);
        assert_eq!(exp.run_static_trial(3).unwrap(), exp.run_static_trial(3).unwrap());
        assert_ne!(exp.run_static_trial(3).unwrap(), exp.run_static_trial(4).unwrap());
    }

    #[test]
    fn identical_trials_have_zero_spread() {
        let exp = small_experiment(2);
        let r = exp.run_static_trial(0).unwrap();
        let s = exp.aggregate(&[r.clone(), r]).unwrap();
        assert_eq!(s.background_error.std, 0.0);
        assert!(s.methods.iter().flat_map(|m| &m.iterations).all(|it| it.error.std == 0.0));
    }

    #[test]
    fn monte_carlo_is_thread_independent() {
        let exp = small_experiment(40);
        let a = exp.run_monte_carlo().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| exp.run_monte_carlo().unwrap());
        assert_eq!(a, b);
        assert_eq!(a.methods[0].iterations.len(), 10);
        assert!(small_experiment(1).run_monte_carlo().is_err());
    }

    #[test]
    fn placement_parsing() {
        assert_eq!("first-step-only".parse::<Placement>().unwrap(), Placement::FirstStepOnly);
        assert_eq!("EveryStep".parse::<Placement>().unwrap(), Placement::EveryStep);
        assert!("sometimes".parse::<Placement>().is_err());
    }

    #[test]
    fn never_placement_duplicates_three_dvar() {
        let cfg = DynamicChainConfig {
            cycles: 3,
            interval_steps: 20,
            first_analysis_steps: 20,
            placement: Placement::Never,
            trials: 2,
            ..DynamicChainConfig::default()
        };
        let stats = run_dynamic_chain(cfg, generate_h(&BinomialSelectionSpec::default()).unwrap()).unwrap();
        assert_eq!(stats.len(), 3);
        for c in &stats {
            assert_eq!(c.three_dvar, c.cute);
            assert_eq!(c.three_dvar, c.publ);
        }
    }
}
