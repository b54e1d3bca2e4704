//! Trajectory driver, Monte Carlo estimators, parameter sweeps and the experiment presets.
//!
//! Trajectories are independent work items on the rayon pool. Per-trajectory results
//! are collected in index order and reduced sequentially with compensated summation,
//! so estimates are bitwise identical for any worker count.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::manifold::{identity_flat, ConstraintModel, Manifold};
use crate::schemes::{ForceField, SchemeId, SchemeParams, Stepper};
use crate::stochastic::{NoiseKind, NoiseStream};

/// Trajectories whose state norm exceeds this are stopped and counted as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e8;
/// Largest tolerated fraction of lost trajectories for a manifold-respecting scheme.
pub const FAILURE_FRACTION: f64 = 1e-3;
/// Offset added to the seed for reference runs, keeping them independent of the runs they judge.
pub const REFERENCE_SEED_OFFSET: u64 = 0x5EED_0000_0000_0001;

/// Observable `φ` whose expectation is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TestFunction {
    /// `|x|²`
    #[default]
    Abs2,
    /// Trace of the square matrix stored row-major in `x`.
    Trace,
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Abs2 => linalg::dot(x, x),
            TestFunction::Trace => {
                let m = (x.len() as f64).sqrt().round() as usize;
                (0..m).map(|a| x[a * m + a]).sum()
            }
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TestFunction::Abs2 => "abs2",
            TestFunction::Trace => "trace",
        }
    }
}

impl FromStr for TestFunction {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "abs2" => Ok(TestFunction::Abs2),
            "trace" => Ok(TestFunction::Trace),
            _ => Err(format!("unknown test function `{s}` (expected abs2|trace)")),
        }
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything that defines one Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub manifold: Manifold,
    pub force: ForceField,
    pub x0: Vec<f64>,
    pub sigma: f64,
    /// Final time `T`; `T / h` must be an integer.
    pub t_final: f64,
    pub h: f64,
    pub eps: f64,
    /// Number of trajectories `M`.
    pub trajectories: usize,
    pub scheme: SchemeId,
    pub test_fn: TestFunction,
    pub seed: u64,
    /// Timestep of the UA reference run.
    pub h_ref: f64,
    pub noise: NoiseKind,
    pub tol: f64,
    pub max_iter: usize,
}

impl ExperimentConfig {
    /// Torus `R = 3, r = 1` with `f = −25(x₁ − 2, x₂, x₃)`, `σ = √2`, `T = 10`,
    /// `X₀ = (2, 0, 0)`, `φ = |x|²`, `h = 2⁻⁹ T`, `h_ref = 2⁻¹² T`.
    pub fn torus() -> Self {
        let m = Manifold::torus();
        Self {
            x0: m.reference_point(),
            manifold: m,
            force: ForceField::TorusConfinement {
                major: Manifold::TORUS_MAJOR,
                minor: Manifold::TORUS_MINOR,
            },
            sigma: std::f64::consts::SQRT_2,
            t_final: 10.0,
            h: 10.0 * 2f64.powi(-9),
            eps: 1.0,
            trajectories: 100_000,
            scheme: SchemeId::Ua,
            test_fn: TestFunction::Abs2,
            seed: 0,
            h_ref: 10.0 * 2f64.powi(-12),
            noise: NoiseKind::Discrete,
            tol: SchemeParams::DEFAULT_TOL,
            max_iter: SchemeParams::DEFAULT_MAX_ITER,
        }
    }

    /// `O(m)` with `f = −100(x − I)`, `σ = √2`, `T = 1`, `h = 2⁻⁷`, `ε = 0.005`,
    /// `X₀ = I`, `φ = Tr`, `h_ref = 2⁻⁹`.
    pub fn orthogonal(m: usize) -> Self {
        Self {
            manifold: Manifold::OrthogonalGroup { m },
            force: ForceField::OrthogonalWell { m },
            x0: identity_flat(m),
            sigma: std::f64::consts::SQRT_2,
            t_final: 1.0,
            h: 2f64.powi(-7),
            eps: 0.005,
            trajectories: 100_000,
            scheme: SchemeId::Ua,
            test_fn: TestFunction::Trace,
            seed: 0,
            h_ref: 2f64.powi(-9),
            noise: NoiseKind::Discrete,
            tol: SchemeParams::DEFAULT_TOL,
            max_iter: SchemeParams::DEFAULT_MAX_ITER,
        }
    }

    pub fn params(&self) -> SchemeParams {
        SchemeParams {
            h: self.h,
            eps: self.eps,
            sigma: self.sigma,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }

    /// Number of steps `N = T / h`.
    pub fn steps(&self) -> Result<usize> {
        steps_for(self.t_final, self.h, "h")
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        self.steps()?;
        if self.x0.len() != self.manifold.dim() {
            return Err(Error::config(
                "x0",
                format!("expected {} coordinates, got {}", self.manifold.dim(), self.x0.len()),
            ));
        }
        if self.trajectories == 0 {
            return Err(Error::config("trajectories", "need at least one trajectory"));
        }
        if self.test_fn == TestFunction::Trace {
            let d = self.manifold.dim();
            let m = (d as f64).sqrt().round() as usize;
            if m * m != d {
                return Err(Error::config("test_fn", "trace needs a square-matrix state"));
            }
        }
        Ok(())
    }

    /// The same experiment at the reference timestep with the UA scheme and an independent seed.
    pub fn reference(&self) -> Self {
        Self {
            h: self.h_ref,
            scheme: SchemeId::Ua,
            seed: self.seed.wrapping_add(REFERENCE_SEED_OFFSET),
            ..self.clone()
        }
    }
}

fn steps_for(t: f64, h: f64, key: &str) -> Result<usize> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config("t_final", format!("final time must be positive, got {t}")));
    }
    if !(h > 0.0) {
        return Err(Error::config(key, format!("timestep must be positive, got {h}")));
    }
    let n = (t / h).round();
    if n < 1.0 || (n * h - t).abs() > 1e-9 * t {
        return Err(Error::config(key, format!("T / {key} = {} is not a positive integer", t / h)));
    }
    Ok(n as usize)
}

/// Result of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryOutcome {
    pub state: Vec<f64>,
    /// `max_n |ζ(X_n)|_∞` over the path including both endpoints.
    pub max_abs_zeta: f64,
    /// Total solver iterations.
    pub iterations: u64,
    /// Steps actually taken (fewer than `N` after divergence).
    pub steps: usize,
    pub diverged: bool,
}

/// Reusable per-worker state for running trajectories of one configuration.
struct Runner<'a> {
    config: &'a ExperimentConfig,
    params: SchemeParams,
    n_steps: usize,
    stepper: Stepper,
    x: Vec<f64>,
    y: Vec<f64>,
    xi: Vec<f64>,
    zeta: Vec<f64>,
}

impl<'a> Runner<'a> {
    fn new(config: &'a ExperimentConfig) -> Result<Self> {
        let d = config.manifold.dim();
        Ok(Self {
            config,
            params: config.params(),
            n_steps: config.steps()?,
            stepper: Stepper::for_model(&config.manifold),
            x: vec![0.0; d],
            y: vec![0.0; d],
            xi: vec![0.0; d],
            zeta: vec![0.0; config.manifold.codim()],
        })
    }

    /// Runs trajectory `index`, calling `visit(n, X_n)` after every step.
    fn run(&mut self, scheme: SchemeId, index: u64, mut visit: impl FnMut(usize, &[f64])) -> Result<TrajectoryOutcome> {
        let cfg = self.config;
        let model = &cfg.manifold;
        let mut noise = NoiseStream::new(cfg.seed, index, model.dim(), cfg.noise);
        self.x.copy_from_slice(&cfg.x0);
        let mut max_zeta: f64 = 0.0;
        let mut iterations = 0u64;
        for n in 0..self.n_steps {
            noise.fill(n as u64, &mut self.xi);
            let stats = self
                .stepper
                .step(scheme, model, &cfg.force, &self.params, &self.x, &self.xi, &mut self.y)
                .map_err(|e| Error::TrajectoryStep {
                    trajectory: index,
                    step: n,
                    source: Box::new(e),
                })?;
            iterations += stats.iterations as u64;
            max_zeta = max_zeta.max(linalg::norm_inf(self.stepper.base_zeta()));
            std::mem::swap(&mut self.x, &mut self.y);
            visit(n + 1, &self.x);
            let n2 = linalg::dot(&self.x, &self.x);
            if !(n2 <= DIVERGENCE_BOUND * DIVERGENCE_BOUND) {
                return Ok(TrajectoryOutcome {
                    state: self.x.clone(),
                    max_abs_zeta: f64::INFINITY,
                    iterations,
                    steps: n + 1,
                    diverged: true,
                });
            }
        }
        model.zeta(&self.x, &mut self.zeta);
        max_zeta = max_zeta.max(linalg::norm_inf(&self.zeta));
        Ok(TrajectoryOutcome {
            state: self.x.clone(),
            max_abs_zeta: max_zeta,
            iterations,
            steps: self.n_steps,
            diverged: false,
        })
    }
}

/// `N` steps of `scheme` from `config.x0` with the noise of trajectory `index`.
pub fn run_trajectory(config: &ExperimentConfig, scheme: SchemeId, index: u64) -> Result<TrajectoryOutcome> {
    config.validate()?;
    Runner::new(config)?.run(scheme, index, |_, _| {})
}

/// The whole path `X_0, …, X_N` of one trajectory (stops early on divergence).
pub fn trajectory_path(config: &ExperimentConfig, scheme: SchemeId, index: u64) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let mut path = vec![config.x0.clone()];
    Runner::new(config)?.run(scheme, index, |_, x| path.push(x.to_vec()))?;
    Ok(path)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean and standard error (`sample std / √n`) with compensated sums in the given order.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut s = CompensatedSum::default();
    values.iter().for_each(|v| s.add(*v));
    let mean = s.value() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let mut v = CompensatedSum::default();
    values.iter().for_each(|x| v.add((x - mean) * (x - mean)));
    let var = v.value() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Monte Carlo estimate of `E[φ(X_N)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorResult {
    pub mean: f64,
    pub stderr: f64,
    /// Requested trajectory count `M`.
    pub trajectories: usize,
    /// Trajectories stopped by the divergence guard.
    pub diverged: usize,
    /// Trajectories lost to a step failure.
    pub failed: usize,
    pub wall_s: f64,
    /// Mean solver iterations per step over the kept trajectories.
    pub mean_iterations: f64,
    /// Largest `max_n |ζ(X_n)|` over the kept trajectories.
    pub max_abs_zeta: f64,
    /// First step failure, if any, for diagnostics.
    pub first_failure: Option<String>,
}

impl EstimatorResult {
    pub fn kept(&self) -> usize {
        self.trajectories - self.diverged - self.failed
    }

    pub fn lost(&self) -> usize {
        self.diverged + self.failed
    }
}

enum Sample {
    Kept { phi: f64, iterations: u64, steps: usize, max_zeta: f64 },
    Diverged,
    Failed(Error),
}

/// Runs all trajectories and aggregates them without applying the failure policy.
pub fn estimate(config: &ExperimentConfig) -> Result<EstimatorResult> {
    config.validate()?;
    let start = Instant::now();
    let samples: Vec<Sample> = (0..config.trajectories as u64)
        .into_par_iter()
        .map_init(
            || Runner::new(config).expect("validated config"),
            |runner, index| match runner.run(config.scheme, index, |_, _| {}) {
                Ok(o) if o.diverged => Sample::Diverged,
                Ok(o) => Sample::Kept {
                    phi: config.test_fn.eval(&o.state),
                    iterations: o.iterations,
                    steps: o.steps,
                    max_zeta: o.max_abs_zeta,
                },
                Err(e) => Sample::Failed(e),
            },
        )
        .collect();
    let mut phis = Vec::with_capacity(samples.len());
    let (mut iters, mut steps) = (0u64, 0u64);
    let (mut diverged, mut failed) = (0, 0);
    let mut max_zeta: f64 = 0.0;
    let mut first_failure = None;
    for s in samples {
        match s {
            Sample::Kept {
                phi,
                iterations,
                steps: n,
                max_zeta: z,
            } => {
                phis.push(phi);
                iters += iterations;
                steps += n as u64;
                max_zeta = max_zeta.max(z);
            }
            Sample::Diverged => diverged += 1,
            Sample::Failed(e) => {
                failed += 1;
                first_failure.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let (mean, stderr) = mean_stderr(&phis);
    Ok(EstimatorResult {
        mean,
        stderr,
        trajectories: config.trajectories,
        diverged,
        failed,
        wall_s: start.elapsed().as_secs_f64(),
        mean_iterations: if steps > 0 { iters as f64 / steps as f64 } else { f64::NAN },
        max_abs_zeta: max_zeta,
        first_failure,
    })
}

/// Failure policy: manifold-respecting schemes may lose at most 0.1 % of trajectories.
pub fn check_failures(scheme: SchemeId, r: &EstimatorResult) -> Result<()> {
    let limit = (FAILURE_FRACTION * r.trajectories as f64).floor() as usize;
    if scheme.respects_manifold() && r.lost() > limit {
        return Err(Error::TooManyFailures {
            failed: r.lost(),
            total: r.trajectories,
            limit,
        });
    }
    Ok(())
}

/// `(1/M) Σ φ(X_N^{(m)})` with its standard error; errors out when too many trajectories are lost.
pub fn weak_estimate(config: &ExperimentConfig) -> Result<EstimatorResult> {
    let r = estimate(config)?;
    check_failures(config.scheme, &r)?;
    Ok(r)
}

type RefKey = (String, u64, u64, u64, usize, u64);
type RefSlot = Arc<OnceLock<std::result::Result<EstimatorResult, Error>>>;

fn reference_cache() -> &'static Mutex<HashMap<RefKey, RefSlot>> {
    static CACHE: OnceLock<Mutex<HashMap<RefKey, RefSlot>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// UA estimate at `h_ref` for `config` (independent seed). Memoized for the process lifetime,
/// since sweeps and checks ask for the same references repeatedly.
pub fn reference_estimate(config: &ExperimentConfig) -> Result<EstimatorResult> {
    let r = config.reference();
    let key = (
        format!("{:?}|{:?}|{:?}|{}|{}|{:?}", r.manifold, r.force, r.x0, r.test_fn, r.noise, r.tol),
        r.h.to_bits(),
        r.eps.to_bits(),
        r.sigma.to_bits() ^ r.t_final.to_bits().rotate_left(17),
        r.trajectories,
        r.seed,
    );
    let slot = {
        let mut cache = reference_cache().lock().unwrap_or_else(|p| p.into_inner());
        cache.entry(key).or_default().clone()
    };
    slot.get_or_init(|| weak_estimate(&r)).clone()
}

/// One row of an `ε` or `h` sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub eps: f64,
    pub h: f64,
    pub scheme: SchemeId,
    pub estimate: f64,
    pub stderr: f64,
    pub reference: f64,
    pub reference_stderr: f64,
    pub error_vs_ref: f64,
    pub trajectories: usize,
    pub mean_fp_iters: f64,
    /// Trajectories lost to divergence or step failure.
    pub diverged: usize,
    pub wall_s: f64,
}

impl SweepRow {
    /// `√(se² + se_ref²)`
    pub fn pooled_stderr(&self) -> f64 {
        self.stderr.hypot(self.reference_stderr)
    }

    /// More than 0.1 % of the trajectories were lost.
    pub fn is_divergent(&self) -> bool {
        self.diverged as f64 > FAILURE_FRACTION * self.trajectories as f64
    }
}

fn sweep_row(config: &ExperimentConfig, r: &EstimatorResult, reference: &EstimatorResult) -> SweepRow {
    let kept = r.kept() > 0;
    SweepRow {
        eps: config.eps,
        h: config.h,
        scheme: config.scheme,
        estimate: r.mean,
        stderr: r.stderr,
        reference: reference.mean,
        reference_stderr: reference.stderr,
        error_vs_ref: if kept { (r.mean - reference.mean).abs() } else { f64::NAN },
        trajectories: r.trajectories,
        mean_fp_iters: r.mean_iterations,
        diverged: r.lost(),
        wall_s: r.wall_s,
    }
}

/// Reference for a sweep cell. A reference that cannot be computed is recorded as NaN
/// so the sweep still emits its rows.
fn sweep_reference(config: &ExperimentConfig) -> EstimatorResult {
    reference_estimate(config).unwrap_or_else(|e| EstimatorResult {
        mean: f64::NAN,
        stderr: f64::NAN,
        trajectories: config.trajectories,
        diverged: 0,
        failed: config.trajectories,
        wall_s: 0.0,
        mean_iterations: f64::NAN,
        max_abs_zeta: f64::NAN,
        first_failure: Some(e.to_string()),
    })
}

/// Error of each scheme against the UA reference at `h_ref`, one reference per `ε`.
/// Each row is handed to `sink` as soon as it is complete.
pub fn sweep_eps(
    config: &ExperimentConfig,
    eps_list: &[f64],
    schemes: &[SchemeId],
    mut sink: impl FnMut(&SweepRow) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    // constrained Euler ignores ε: its run is shared by the whole grid
    let mut eps_free: HashMap<SchemeId, EstimatorResult> = HashMap::new();
    for &eps in eps_list {
        let cfg = ExperimentConfig { eps, ..config.clone() };
        let reference = sweep_reference(&cfg);
        for &scheme in schemes {
            let cell = ExperimentConfig { scheme, ..cfg.clone() };
            let r = if scheme.is_constrained() {
                match eps_free.get(&scheme) {
                    Some(r) => r.clone(),
                    None => {
                        let r = estimate(&cell)?;
                        eps_free.insert(scheme, r.clone());
                        r
                    }
                }
            } else {
                estimate(&cell)?
            };
            let row = sweep_row(&cell, &r, &reference);
            sink(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Error of each scheme against one UA reference at `h_ref`, over a list of timesteps.
pub fn sweep_h(
    config: &ExperimentConfig,
    h_list: &[f64],
    schemes: &[SchemeId],
    mut sink: impl FnMut(&SweepRow) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    let reference = sweep_reference(config);
    let mut rows = Vec::new();
    for &h in h_list {
        for &scheme in schemes {
            let cell = ExperimentConfig { h, scheme, ..config.clone() };
            let row = sweep_row(&cell, &estimate(&cell)?, &reference);
            sink(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Ordinary least squares fit of `log₁₀ y = slope · log₁₀ x + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: Vec<(f64, f64)>,
}

pub fn fit_loglog(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 2 || points.iter().any(|(x, y)| !(*x > 0.0 && *y > 0.0 && y.is_finite())) {
        return Err(Error::config(
            "fit",
            format!("log-log fit needs at least two positive points, got {points:?}"),
        ));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.log10()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        points: points.to_vec(),
    })
}

/// Mean over trajectories of `max_n |ζ(X_n)|` for the UA scheme at each `ε`, and its log-log slope.
pub fn zeta_decay_vs_eps(config: &ExperimentConfig, eps_list: &[f64]) -> Result<SlopeFit> {
    let mut points = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let cfg = ExperimentConfig {
            eps,
            scheme: SchemeId::Ua,
            ..config.clone()
        };
        cfg.validate()?;
        let outcomes = par_trajectories(&cfg, |runner, i| runner.run(SchemeId::Ua, i, |_, _| {}))?;
        let values: Vec<f64> = outcomes.iter().map(|o| o.max_abs_zeta).collect();
        points.push((eps, mean_stderr(&values).0));
    }
    fit_loglog(&points)
}

fn par_trajectories<T: Send>(
    config: &ExperimentConfig,
    f: impl Fn(&mut Runner<'_>, u64) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    (0..config.trajectories as u64)
        .into_par_iter()
        .map_init(|| Runner::new(config).expect("validated config"), |r, i| f(r, i))
        .collect()
}

/// Statistics of the distance between two schemes driven by identical noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GapStats {
    pub eps: f64,
    /// `E |X_N^a − X_N^b|²`
    pub mean_sq_final: f64,
    /// Mean over trajectories of `max_n |X_n^a − X_n^b|`.
    pub mean_max: f64,
    /// Largest per-trajectory `max_n |X_n^a − X_n^b|`.
    pub max_max: f64,
    pub trajectories: usize,
}

/// Runs `scheme_a` at `config.eps` and `scheme_b` (whose step ignores `ε` for constrained Euler)
/// on the same noise, trajectory by trajectory.
pub fn coupled_gap(config: &ExperimentConfig, scheme_a: SchemeId, scheme_b: SchemeId) -> Result<GapStats> {
    config.validate()?;
    let n_steps = config.steps()?;
    let per_traj: Vec<(f64, f64)> = par_trajectories(config, |runner, index| {
        let mut path_b = Vec::with_capacity(n_steps * config.x0.len());
        runner.run(scheme_b, index, |_, x| path_b.extend_from_slice(x))?;
        let d = config.x0.len();
        let mut max_gap: f64 = 0.0;
        let out = runner.run(scheme_a, index, |n, x| {
            let b = &path_b[(n - 1) * d..n * d];
            let gap = x.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            max_gap = max_gap.max(gap);
        })?;
        let last = &path_b[path_b.len() - d..];
        let sq: f64 = out.state.iter().zip(last).map(|(u, v)| (u - v) * (u - v)).sum();
        Ok((sq, max_gap))
    })?;
    let sq: Vec<f64> = per_traj.iter().map(|p| p.0).collect();
    let mx: Vec<f64> = per_traj.iter().map(|p| p.1).collect();
    Ok(GapStats {
        eps: config.eps,
        mean_sq_final: mean_stderr(&sq).0,
        mean_max: mean_stderr(&mx).0,
        max_max: mx.iter().copied().fold(0.0, f64::max),
        trajectories: config.trajectories,
    })
}

/// Coupled UA / constrained Euler gaps over an `ε` grid.
pub fn gap_vs_eps(config: &ExperimentConfig, eps_list: &[f64]) -> Result<Vec<GapStats>> {
    eps_list
        .iter()
        .map(|&eps| coupled_gap(&ExperimentConfig { eps, ..config.clone() }, SchemeId::Ua, SchemeId::EulerConstrained))
        .collect()
}

/// Slope of `E |X_N^ε − X_N^0|²` against `ε` (UA vs constrained Euler, coupled noise).
pub fn strong_gap_vs_eps(config: &ExperimentConfig, eps_list: &[f64]) -> Result<SlopeFit> {
    let gaps = gap_vs_eps(config, eps_list)?;
    fit_loglog(&gaps.iter().map(|g| (g.eps, g.mean_sq_final)).collect::<Vec<_>>())
}

/// Weak error of `config.scheme` at `config.h` against the UA reference at `h_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantError {
    pub estimate: EstimatorResult,
    pub reference: EstimatorResult,
    pub error: f64,
    pub pooled_stderr: f64,
}

pub fn invariant_measure_error(config: &ExperimentConfig) -> Result<InvariantError> {
    let reference = reference_estimate(config)?;
    let estimate = if config.h == config.h_ref && config.scheme == SchemeId::Ua {
        reference.clone()
    } else {
        weak_estimate(config)?
    };
    Ok(InvariantError {
        error: (estimate.mean - reference.mean).abs(),
        pooled_stderr: estimate.stderr.hypot(reference.stderr),
        estimate,
        reference,
    })
}

/// Mean solver iterations per UA step at each `ε`.
pub fn solver_cost_vs_eps(config: &ExperimentConfig, eps_list: &[f64]) -> Result<Vec<(f64, f64)>> {
    eps_list
        .iter()
        .map(|&eps| {
            let r = weak_estimate(&ExperimentConfig {
                eps,
                scheme: SchemeId::Ua,
                ..config.clone()
            })?;
            Ok((eps, r.mean_iterations))
        })
        .collect()
}

/// One row of the orthogonal-group table.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthRow {
    pub m: usize,
    pub dim: usize,
    pub codim: usize,
    pub j_ref: f64,
    pub j_ua: f64,
    pub err_ua: f64,
    pub j_ec: f64,
    pub err_ec: f64,
    pub se_ref: f64,
    pub se_ua: f64,
    pub se_ec: f64,
}

/// `J(m) = E[Tr X_T]` on `O(m)` by UA and constrained Euler against a UA reference at `h_ref`.
/// `base` supplies everything except the manifold, force and initial point.
pub fn orth_group_table(
    m_list: &[usize],
    base: &ExperimentConfig,
    mut sink: impl FnMut(&OrthRow) -> Result<()>,
) -> Result<Vec<OrthRow>> {
    let mut rows = Vec::new();
    for &m in m_list {
        let preset = ExperimentConfig::orthogonal(m);
        let cfg = ExperimentConfig {
            manifold: preset.manifold.clone(),
            force: preset.force.clone(),
            x0: preset.x0.clone(),
            test_fn: TestFunction::Trace,
            ..base.clone()
        };
        let reference = reference_estimate(&cfg)?;
        let ua = weak_estimate(&ExperimentConfig {
            scheme: SchemeId::Ua,
            ..cfg.clone()
        })?;
        let ec = weak_estimate(&ExperimentConfig {
            scheme: SchemeId::EulerConstrained,
            ..cfg.clone()
        })?;
        let row = OrthRow {
            m,
            dim: m * (m - 1) / 2,
            codim: m * (m + 1) / 2,
            j_ref: reference.mean,
            j_ua: ua.mean,
            err_ua: (ua.mean - reference.mean).abs(),
            j_ec: ec.mean,
            err_ec: (ec.mean - reference.mean).abs(),
            se_ref: reference.stderr,
            se_ua: ua.stderr,
            se_ec: ec.stderr,
        };
        sink(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Largest `(1 − e^{−h/ε}) |ζ(X_n)| / (√h |g(X_n)|)` along UA trajectories.
///
/// Dividing by `|g|` puts models with different gradient scales on the footing of a unit
/// normal, so the hyperplane value serves as the reference constant.
pub fn ua_zeta_envelope(config: &ExperimentConfig) -> Result<f64> {
    config.validate()?;
    let model = &config.manifold;
    let (d, q) = (model.dim(), model.codim());
    let k_om = config.params().coeffs().k_om;
    let scale = k_om / config.h.sqrt();
    let values = par_trajectories(config, |runner, index| {
        let mut z = vec![0.0; q];
        let mut g = vec![0.0; d * q];
        let mut worst: f64 = 0.0;
        runner.run(SchemeId::Ua, index, |_, x| {
            model.zeta(x, &mut z);
            model.grad(x, &mut g);
            let gn = linalg::norm(&g).max(f64::MIN_POSITIVE);
            worst = worst.max(scale * linalg::norm(&z) / gn);
        })?;
        Ok(worst)
    })?;
    Ok(values.into_iter().fold(0.0, f64::max))
}

/// `2⁰, 2⁻¹, …, 2⁻ᵏ`
pub fn pow2_grid(k: i32) -> Vec<f64> {
    (0..=k).map(|i| 2f64.powi(-i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schemes::stiff_coeffs;

    fn small(mut c: ExperimentConfig, m: usize) -> ExperimentConfig {
        c.trajectories = m;
        c
    }

    #[test]
    fn presets_have_integer_step_counts() {
        assert_eq!(ExperimentConfig::torus().steps().unwrap(), 512);
        assert_eq!(ExperimentConfig::torus().reference().steps().unwrap(), 4096);
        assert_eq!(ExperimentConfig::orthogonal(3).steps().unwrap(), 128);
        let mut c = ExperimentConfig::torus();
        c.h = 0.3;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "h"));
    }

    #[test]
    fn equilibrium_is_preserved() {
        let mut c = ExperimentConfig::torus();
        c.sigma = 0.0;
        c.h = 10.0 * 2f64.powi(-6);
        for eps in [1e-8, 1e-2, 1.0] {
            c.eps = eps;
            let o = run_trajectory(&c, SchemeId::Ua, 0).unwrap();
            assert_eq!(o.state, vec![2.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn hyperplane_ua_is_discrete_ou_recursion() {
        let c = ExperimentConfig {
            manifold: Manifold::hyperplane(3),
            force: ForceField::Zero,
            x0: vec![0.0, 0.0, 0.5],
            sigma: 1.3,
            t_final: 1.0,
            h: 1.0 / 64.0,
            eps: 0.01,
            trajectories: 1,
            ..ExperimentConfig::torus()
        };
        let out = run_trajectory(&c, SchemeId::Ua, 5).unwrap();
        let k = stiff_coeffs(c.h, c.eps);
        let mut xd = 0.5;
        let mut s = NoiseStream::new(c.seed, 5, 3, c.noise);
        for n in 0..64 {
            let xi = s.sample(n);
            xd = k.k_exp * xd + c.sigma * k.k_noise * xi[2];
        }
        assert!((out.state[2] - xd).abs() < 1e-12);
    }

    #[test]
    fn euler_rd_blowup_is_flagged() {
        let c = ExperimentConfig {
            manifold: Manifold::hyperplane(2),
            force: ForceField::Zero,
            x0: vec![0.0, 1.0],
            sigma: 0.0,
            t_final: 100.0,
            h: 1.0,
            eps: 0.25,
            h_ref: 1.0,
            ..ExperimentConfig::torus()
        };
        let o = run_trajectory(&c, SchemeId::EulerRd, 0).unwrap();
        assert!(o.diverged);
        assert_eq!(o.steps, 17); // 3¹⁷ > 10⁸
        let r = estimate(&small(ExperimentConfig { scheme: SchemeId::EulerRd, ..c }, 4)).unwrap();
        assert_eq!(r.diverged, 4);
    }

    #[test]
    fn deterministic_estimates_have_zero_stderr() {
        let mut c = small(ExperimentConfig::orthogonal(2), 3);
        c.sigma = 0.0;
        c.h = 2f64.powi(-5);
        let r = weak_estimate(&c).unwrap();
        assert_eq!(r.stderr, 0.0);
        let one = run_trajectory(&c, SchemeId::Ua, 0).unwrap();
        assert_eq!(r.mean, TestFunction::Trace.eval(&one.state));
    }

    #[test]
    fn estimates_are_reproducible_across_pools() {
        let mut c = small(ExperimentConfig::torus(), 64);
        c.t_final = 1.0;
        c.h = 2f64.powi(-6);
        c.h_ref = c.h;
        let a = weak_estimate(&c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| weak_estimate(&c).unwrap());
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
        let e = invariant_measure_error(&ExperimentConfig { h: c.h_ref, ..c.clone() }).unwrap();
        assert_eq!(e.error, 0.0);
    }

    #[test]
    fn compensated_sum_and_fit() {
        let mut s = CompensatedSum::default();
        for v in [1e16, 1.0, -1e16, 1.0] {
            s.add(v);
        }
        assert_eq!(s.value(), 2.0);
        let pts: Vec<(f64, f64)> = [1e-1, 1e-2, 1e-3, 1e-4].iter().map(|&x: &f64| (x, 3.0 * x.sqrt())).collect();
        let f = fit_loglog(&pts).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!(fit_loglog(&[(1.0, 0.0), (2.0, 1.0)]).is_err());
        assert_eq!(mean_stderr(&[1.0, 3.0]), (2.0, 1.0));
    }

    #[test]
    fn trace_and_abs2() {
        assert_eq!(TestFunction::Trace.eval(&[1.0, 5.0, 7.0, 2.0]), 3.0);
        assert_eq!(TestFunction::Abs2.eval(&[3.0, 4.0]), 25.0);
        assert_eq!("trace".parse::<TestFunction>().unwrap(), TestFunction::Trace);
    }
}
