//! Independent time-domain ground truth.
//!
//! Fixed-step classical Runge-Kutta integration of the equations of motion,
//! steady-state detection by comparing consecutive grid-period windows,
//! Fourier extraction of steady states, verification of harmonic balance
//! points and grid sweeps over initial conditions that seed isolated
//! branches.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::hbm::{
    synthesize_time_series, synthesize_velocity_series, HarmonicVector, TWO_PI,
};
use crate::model::SystemModel;

/// Relative steady-state threshold: the maximum point-wise deviation between
/// the last two grid-period windows, measured against the peak amplitude.
pub const STEADY_TOL: f64 = 1e-6;

/// Hard cap on the transient length, in forcing periods.
pub const MAX_TRANSIENT_PERIODS: usize = 5000;

/// Default fixed-step resolution.
pub const STEPS_PER_PERIOD: usize = 500;

/// State bound beyond which the trajectory is declared divergent.
const DIVERGENCE_BOUND: f64 = 1e8;

/// A sampled trajectory with uniform time step.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// One column per DOF.
    pub displacements: DMatrix<f64>,
    pub velocities: DMatrix<f64>,
    pub omega: f64,
    pub forcing_amplitude: f64,
    pub steps_per_period: usize,
}

/// Fourier estimate of a steady state on a chosen subharmonic grid.
#[derive(Debug, Clone)]
pub struct SteadyStateEstimate {
    pub coeffs: HarmonicVector,
    pub omega: f64,
    pub forcing_amplitude: f64,
    /// Max point-wise deviation between the last two grid-period windows,
    /// relative to the peak amplitude.
    pub periodicity_residual: f64,
    /// Smallest p such that the content is p*T periodic (1 = harmonic
    /// response, nu = full subharmonic orbit).
    pub period_factor: usize,
}

/// Right-hand side context with the mass matrix pre-factored.
struct Dynamics<'a> {
    model: &'a SystemModel,
    m_inv: DMatrix<f64>,
    forcing: f64,
    omega: f64,
    n: usize,
}

impl<'a> Dynamics<'a> {
    fn new(model: &'a SystemModel, forcing: f64, omega: f64) -> Result<Self> {
        let m_inv = model
            .mass()
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| CoreError::InvalidModel("mass matrix is singular".into()))?;
        Ok(Self {
            model,
            m_inv,
            forcing,
            omega,
            n: model.dof_count(),
        })
    }

    /// acc = M^-1 (f e_l sin(w t) - C v - K x - f_nl(x))
    fn acceleration(&self, t: f64, x: &[f64], v: &[f64], acc: &mut [f64]) {
        let c = self.model.damping();
        let k = self.model.stiffness();
        let mut rhs = [0.0f64; 8];
        let rhs = &mut rhs[..self.n];
        for i in 0..self.n {
            let mut sum = 0.0;
            for j in 0..self.n {
                sum += c[(i, j)] * v[j] + k[(i, j)] * x[j];
            }
            rhs[i] = -sum;
        }
        rhs[self.model.forcing_dof()] += self.forcing * (self.omega * t).sin();
        for term in self.model.nonlinear_terms() {
            rhs[term.target] -= term.coefficient * x[term.source].powi(term.exponent as i32);
        }
        for i in 0..self.n {
            let mut sum = 0.0;
            for j in 0..self.n {
                sum += self.m_inv[(i, j)] * rhs[j];
            }
            acc[i] = sum;
        }
    }
}

/// One classical RK4 step of the second-order system.
fn rk4_step(dyn_ctx: &Dynamics, t: f64, h: f64, x: &mut [f64], v: &mut [f64]) {
    let n = x.len();
    let mut buf = [0.0f64; 8 * 6];
    let (k1x, rest) = buf.split_at_mut(8);
    let (k1v, rest) = rest.split_at_mut(8);
    let (k2x, rest) = rest.split_at_mut(8);
    let (k2v, rest) = rest.split_at_mut(8);
    let (xs, vs) = rest.split_at_mut(8);
    let (k1x, k1v) = (&mut k1x[..n], &mut k1v[..n]);
    let (k2x, k2v) = (&mut k2x[..n], &mut k2v[..n]);
    let (xs, vs) = (&mut xs[..n], &mut vs[..n]);

    // accumulators for the weighted sum of stages
    let mut sx = [0.0f64; 8];
    let mut sv = [0.0f64; 8];
    let (sx, sv) = (&mut sx[..n], &mut sv[..n]);

    // stage 1
    dyn_ctx.acceleration(t, x, v, k1v);
    k1x.copy_from_slice(v);
    for i in 0..n {
        sx[i] += k1x[i];
        sv[i] += k1v[i];
    }
    // stage 2
    for i in 0..n {
        xs[i] = x[i] + 0.5 * h * k1x[i];
        vs[i] = v[i] + 0.5 * h * k1v[i];
    }
    dyn_ctx.acceleration(t + 0.5 * h, xs, vs, k2v);
    k2x.copy_from_slice(vs);
    for i in 0..n {
        sx[i] += 2.0 * k2x[i];
        sv[i] += 2.0 * k2v[i];
    }
    // stage 3
    for i in 0..n {
        xs[i] = x[i] + 0.5 * h * k2x[i];
        vs[i] = v[i] + 0.5 * h * k2v[i];
    }
    dyn_ctx.acceleration(t + 0.5 * h, xs, vs, k1v);
    k1x.copy_from_slice(vs);
    for i in 0..n {
        sx[i] += 2.0 * k1x[i];
        sv[i] += 2.0 * k1v[i];
    }
    // stage 4
    for i in 0..n {
        xs[i] = x[i] + h * k1x[i];
        vs[i] = v[i] + h * k1v[i];
    }
    dyn_ctx.acceleration(t + h, xs, vs, k2v);
    k2x.copy_from_slice(vs);
    for i in 0..n {
        x[i] += h / 6.0 * (sx[i] + k2x[i]);
        v[i] += h / 6.0 * (sv[i] + k2v[i]);
    }
}

/// Integrates the forced equations of motion over `n_periods` forcing periods
/// with a fixed step, storing every sample.
pub fn integrate(
    model: &SystemModel,
    forcing: f64,
    omega: f64,
    x0: &DVector<f64>,
    v0: &DVector<f64>,
    n_periods: usize,
    steps_per_period: usize,
) -> Result<Trajectory> {
    if steps_per_period < 200 {
        return Err(CoreError::InvalidSettings(
            "need at least 200 steps per period for the fixed-step integrator".into(),
        ));
    }
    let n = model.dof_count();
    if x0.len() != n || v0.len() != n {
        return Err(CoreError::DimensionMismatch(
            "initial state does not match the DOF count".into(),
        ));
    }
    if n > 8 {
        return Err(CoreError::InvalidSettings(
            "the time integrator supports up to 8 DOFs".into(),
        ));
    }
    let ctx = Dynamics::new(model, forcing, omega)?;
    let period = TWO_PI / omega;
    let h = period / steps_per_period as f64;
    let total = n_periods * steps_per_period;

    let mut x: Vec<f64> = x0.iter().cloned().collect();
    let mut v: Vec<f64> = v0.iter().cloned().collect();
    let mut times = Vec::with_capacity(total + 1);
    let mut xs = DMatrix::zeros(total + 1, n);
    let mut vs = DMatrix::zeros(total + 1, n);
    for step in 0..=total {
        let t = step as f64 * h;
        times.push(t);
        for d in 0..n {
            xs[(step, d)] = x[d];
            vs[(step, d)] = v[d];
        }
        if step == total {
            break;
        }
        rk4_step(&ctx, t, h, &mut x, &mut v);
        if !state_ok(&x, &v) {
            return Err(CoreError::Divergence(format!(
                "state blew up after {:.1} periods",
                t / period
            )));
        }
    }
    Ok(Trajectory {
        times,
        displacements: xs,
        velocities: vs,
        omega,
        forcing_amplitude: forcing,
        steps_per_period,
    })
}

fn state_ok(x: &[f64], v: &[f64]) -> bool {
    x.iter().chain(v.iter()).all(|s| s.is_finite() && s.abs() < DIVERGENCE_BOUND)
}

/// Projects the last aligned `nu T` window of a trajectory onto the
/// subharmonic basis. Fails when the window-to-window deviation exceeds the
/// steady-state threshold.
pub fn steady_state_fourier(
    traj: &Trajectory,
    nu: usize,
    n_h: usize,
) -> Result<SteadyStateEstimate> {
    steady_state_fourier_with_tol(traj, nu, n_h, STEADY_TOL)
}

pub fn steady_state_fourier_with_tol(
    traj: &Trajectory,
    nu: usize,
    n_h: usize,
    steady_tol: f64,
) -> Result<SteadyStateEstimate> {
    let spp = traj.steps_per_period;
    let window = nu * spp;
    let samples = traj.times.len() - 1; // trailing sample duplicates phase 0
    if samples < 2 * window {
        return Err(CoreError::NotSteady(format!(
            "trajectory spans {samples} samples, need two aligned windows of {window}"
        )));
    }
    // Last window whose start lies on a multiple of nu*T.
    let start = (samples / window - 1) * window;
    let prev = start - window;

    let n = traj.displacements.ncols();
    let mut peak = 0.0f64;
    let mut deviation = 0.0f64;
    for i in 0..window {
        for d in 0..n {
            let cur = traj.displacements[(start + i, d)];
            peak = peak.max(cur.abs());
            deviation = deviation.max((cur - traj.displacements[(prev + i, d)]).abs());
        }
    }
    let scale = peak.max(1e-12);
    let periodicity_residual = deviation / scale;
    if periodicity_residual > steady_tol {
        return Err(CoreError::NotSteady(format!(
            "window deviation {periodicity_residual:.3e} exceeds {steady_tol:.1e}"
        )));
    }

    let coeffs = project_window(&traj.displacements, start, window, n, nu, n_h);
    let period_factor = period_factor(&coeffs);
    Ok(SteadyStateEstimate {
        coeffs,
        omega: traj.omega,
        forcing_amplitude: traj.forcing_amplitude,
        periodicity_residual,
        period_factor,
    })
}

/// DFT of `window` samples starting at an index aligned with the grid period.
fn project_window(
    displacements: &DMatrix<f64>,
    start: usize,
    window: usize,
    n: usize,
    nu: usize,
    n_h: usize,
) -> HarmonicVector {
    let mut coeffs = HarmonicVector::zeros(n_h, nu, n);
    let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
    for i in 0..window {
        for d in 0..n {
            let value = displacements[(start + i, d)];
            let idx_const = coeffs.idx_const(d);
            coeffs.data[idx_const] += value * inv_sqrt2;
            for j in 1..=n_h {
                let angle = TWO_PI * (i * j) as f64 / window as f64;
                let (idx_sin, idx_cos) = (coeffs.idx_sin(j, d), coeffs.idx_cos(j, d));
                coeffs.data[idx_sin] += value * angle.sin();
                coeffs.data[idx_cos] += value * angle.cos();
            }
        }
    }
    coeffs.data *= 2.0 / window as f64;
    coeffs
}

/// Smallest p such that the significant harmonic content is p*T periodic.
fn period_factor(coeffs: &HarmonicVector) -> usize {
    let nu = coeffs.nu;
    let mut amps = vec![0.0f64; coeffs.n_h + 1];
    let mut max_amp = 0.0f64;
    for j in 1..=coeffs.n_h {
        for d in 0..coeffs.n_dofs {
            let a = coeffs.amplitude_phase(d, j).amplitude;
            amps[j] = amps[j].max(a);
            max_amp = max_amp.max(a);
        }
    }
    if max_amp == 0.0 {
        return 1;
    }
    let threshold = 1e-3 * max_amp;
    let mut g = nu;
    for (j, &a) in amps.iter().enumerate().skip(1) {
        if a > threshold {
            g = gcd(g, j);
        }
    }
    nu / g.max(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyOutcome {
    Pass,
    Fail,
    /// The orbit drifted or diverged under integration; this marks an
    /// unstable orbit, not a wrong harmonic balance point.
    Unverifiable,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub outcome: VerifyOutcome,
    /// RMS displacement error over the final window, relative to the RMS of
    /// the reference signal.
    pub rms_error: Option<f64>,
    pub periodicity_residual: Option<f64>,
    /// Per-harmonic (amplitude deviation, phase deviation) at the forced DOF.
    pub harmonic_errors: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyThresholds {
    pub rms_tol: f64,
    /// Relative window-to-window deviation above which the orbit is declared
    /// departed (unstable) rather than wrong.
    pub drift_tol: f64,
    pub periods: usize,
    pub steps_per_period: usize,
}

impl Default for VerifyThresholds {
    fn default() -> Self {
        Self {
            rms_tol: 0.01,
            drift_tol: 0.05,
            periods: 50,
            steps_per_period: STEPS_PER_PERIOD,
        }
    }
}

/// Integrates from the synthesized initial state of a harmonic balance point
/// and reports the deviation after `periods` forcing periods.
pub fn verify_point(
    model: &SystemModel,
    coeffs: &HarmonicVector,
    omega: f64,
    forcing: f64,
    thresholds: &VerifyThresholds,
) -> Result<VerifyReport> {
    let x0 = synthesize_time_series(coeffs, omega, &[0.0]);
    let v0 = synthesize_velocity_series(coeffs, omega, &[0.0]);
    let x0 = DVector::from_fn(coeffs.n_dofs, |d, _| x0[(0, d)]);
    let v0 = DVector::from_fn(coeffs.n_dofs, |d, _| v0[(0, d)]);
    let nu = coeffs.nu;
    let periods = thresholds.periods.max(2 * nu);
    let traj = match integrate(
        model,
        forcing,
        omega,
        &x0,
        &v0,
        periods,
        thresholds.steps_per_period,
    ) {
        Ok(t) => t,
        Err(CoreError::Divergence(_)) => {
            return Ok(VerifyReport {
                outcome: VerifyOutcome::Unverifiable,
                rms_error: None,
                periodicity_residual: None,
                harmonic_errors: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };

    let estimate = match steady_state_fourier_with_tol(&traj, nu, coeffs.n_h, thresholds.drift_tol)
    {
        Ok(e) => e,
        Err(CoreError::NotSteady(_)) => {
            return Ok(VerifyReport {
                outcome: VerifyOutcome::Unverifiable,
                rms_error: None,
                periodicity_residual: None,
                harmonic_errors: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };

    // RMS error over the final window against the reference synthesis.
    let spp = thresholds.steps_per_period;
    let window = nu * spp;
    let samples = traj.times.len() - 1;
    let start = (samples / window - 1) * window;
    let times: Vec<f64> = (0..window).map(|i| traj.times[start + i]).collect();
    let reference = synthesize_time_series(coeffs, omega, &times);
    let mut err2 = 0.0;
    let mut ref2 = 0.0;
    for i in 0..window {
        for d in 0..coeffs.n_dofs {
            let e = traj.displacements[(start + i, d)] - reference[(i, d)];
            err2 += e * e;
            ref2 += reference[(i, d)] * reference[(i, d)];
        }
    }
    let rms_error = (err2 / ref2.max(1e-300)).sqrt();

    let dof = model.forcing_dof();
    let harmonic_errors = (1..=coeffs.n_h)
        .map(|j| {
            let a = coeffs.amplitude_phase(dof, j);
            let b = estimate.coeffs.amplitude_phase(dof, j);
            let amp_dev = (a.amplitude - b.amplitude).abs();
            let phase_dev = if a.degenerate || b.degenerate {
                0.0
            } else {
                crate::hbm::wrap_phase_diff(a.phase - b.phase).abs()
            };
            (amp_dev, phase_dev)
        })
        .collect();

    let outcome = if rms_error <= thresholds.rms_tol {
        VerifyOutcome::Pass
    } else {
        VerifyOutcome::Fail
    };
    Ok(VerifyReport {
        outcome,
        rms_error: Some(rms_error),
        periodicity_residual: Some(estimate.periodicity_residual),
        harmonic_errors,
    })
}

/// Rectangular grid of initial conditions over one DOF; the remaining DOFs
/// start at rest.
#[derive(Debug, Clone, Copy)]
pub struct IcGrid {
    pub dof: usize,
    pub x_range: (f64, f64),
    pub v_range: (f64, f64),
    pub nx: usize,
    pub nv: usize,
}

impl IcGrid {
    pub fn centered(extent: f64, points: usize) -> Self {
        Self {
            dof: 0,
            x_range: (-extent, extent),
            v_range: (-extent, extent),
            nx: points,
            nv: points,
        }
    }

    fn cells(&self) -> Vec<(f64, f64)> {
        let lerp = |range: (f64, f64), i: usize, n: usize| {
            if n <= 1 {
                0.5 * (range.0 + range.1)
            } else {
                range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(self.nx * self.nv);
        for ix in 0..self.nx {
            for iv in 0..self.nv {
                out.push((lerp(self.x_range, ix, self.nx), lerp(self.v_range, iv, self.nv)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub n_h: usize,
    pub steps_per_period: usize,
    pub max_periods: usize,
    pub steady_tol: f64,
    /// Relative tolerance identifying two steady states as the same
    /// attractor (modulo forcing-period time shifts).
    pub cluster_tol: f64,
    /// Worker count; 0 picks the available parallelism.
    pub threads: usize,
}

impl SweepOptions {
    pub fn for_subharmonic(nu: usize) -> Self {
        Self {
            n_h: 8 * nu,
            steps_per_period: STEPS_PER_PERIOD,
            max_periods: MAX_TRANSIENT_PERIODS,
            steady_tol: STEADY_TOL,
            cluster_tol: 1e-3,
            threads: 0,
        }
    }
}

/// Classification of one swept initial condition.
#[derive(Debug, Clone, Copy)]
pub struct BasinCell {
    pub x0: f64,
    pub v0: f64,
    /// Index into the attractor list, `None` when the transient never settled
    /// or the trajectory diverged.
    pub attractor: Option<usize>,
}

#[derive(Debug)]
pub struct SweepResult {
    pub attractors: Vec<SteadyStateEstimate>,
    pub cells: Vec<BasinCell>,
}

/// Integrates every initial condition of the grid to steady state and
/// clusters the distinct attractors (modulo time shifts by whole forcing
/// periods). Results are deterministic: cells follow grid order and
/// attractors are numbered by first appearance.
pub fn seed_isola(
    model: &SystemModel,
    forcing: f64,
    omega: f64,
    nu: usize,
    grid: &IcGrid,
    options: &SweepOptions,
) -> Result<SweepResult> {
    if grid.dof >= model.dof_count() {
        return Err(CoreError::InvalidSettings(
            "sweep DOF out of range".into(),
        ));
    }
    let cells = grid.cells();
    let threads = if options.threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        options.threads
    }
    .min(cells.len().max(1));

    let mut estimates: Vec<Option<SteadyStateEstimate>> = Vec::with_capacity(cells.len());
    if threads <= 1 {
        for &(x0, v0) in &cells {
            estimates.push(settle_ic(model, forcing, omega, nu, grid.dof, x0, v0, options));
        }
    } else {
        let mut slots: Vec<Option<SteadyStateEstimate>> = vec![None; cells.len()];
        let chunk = cells.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (cell_chunk, slot_chunk) in cells.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                scope.spawn(move || {
                    for (&(x0, v0), slot) in cell_chunk.iter().zip(slot_chunk.iter_mut()) {
                        *slot = settle_ic(model, forcing, omega, nu, grid.dof, x0, v0, options);
                    }
                });
            }
        });
        estimates = slots;
    }

    let mut attractors: Vec<SteadyStateEstimate> = Vec::new();
    let mut basin = Vec::with_capacity(cells.len());
    for (&(x0, v0), estimate) in cells.iter().zip(estimates.into_iter()) {
        let attractor = estimate.map(|est| {
            match attractors
                .iter()
                .position(|rep| same_attractor(rep, &est, options.cluster_tol))
            {
                Some(idx) => idx,
                None => {
                    attractors.push(est);
                    attractors.len() - 1
                }
            }
        });
        basin.push(BasinCell { x0, v0, attractor });
    }
    Ok(SweepResult {
        attractors,
        cells: basin,
    })
}

fn settle_ic(
    model: &SystemModel,
    forcing: f64,
    omega: f64,
    nu: usize,
    dof: usize,
    x0: f64,
    v0: f64,
    options: &SweepOptions,
) -> Option<SteadyStateEstimate> {
    let n = model.dof_count();
    let mut x = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    x[dof] = x0;
    v[dof] = v0;
    integrate_to_steady(model, forcing, omega, &x, &v, nu, options).ok()
}

/// Rolling integration that keeps only the last two grid-period windows,
/// stopping as soon as the steady-state criterion holds.
pub fn integrate_to_steady(
    model: &SystemModel,
    forcing: f64,
    omega: f64,
    x0: &DVector<f64>,
    v0: &DVector<f64>,
    nu: usize,
    options: &SweepOptions,
) -> Result<SteadyStateEstimate> {
    let n = model.dof_count();
    if n > 8 {
        return Err(CoreError::InvalidSettings(
            "the time integrator supports up to 8 DOFs".into(),
        ));
    }
    let ctx = Dynamics::new(model, forcing, omega)?;
    let spp = options.steps_per_period;
    let window = nu * spp;
    let period = TWO_PI / omega;
    let h = period / spp as f64;

    let mut x: Vec<f64> = x0.iter().cloned().collect();
    let mut v: Vec<f64> = v0.iter().cloned().collect();
    let mut prev = DMatrix::<f64>::zeros(window, n);
    let mut cur = DMatrix::<f64>::zeros(window, n);
    let mut have_prev = false;
    let mut last_residual = f64::INFINITY;

    let max_blocks = options.max_periods.div_ceil(nu);
    for block in 0..max_blocks {
        for i in 0..window {
            for d in 0..n {
                cur[(i, d)] = x[d];
            }
            let t = (block * window + i) as f64 * h;
            rk4_step(&ctx, t, h, &mut x, &mut v);
            if !state_ok(&x, &v) {
                return Err(CoreError::Divergence(format!(
                    "state blew up after {} periods",
                    block * nu
                )));
            }
        }
        if have_prev {
            let mut peak = 0.0f64;
            let mut deviation = 0.0f64;
            for i in 0..window {
                for d in 0..n {
                    peak = peak.max(cur[(i, d)].abs());
                    deviation = deviation.max((cur[(i, d)] - prev[(i, d)]).abs());
                }
            }
            last_residual = deviation / peak.max(1e-12);
            if last_residual < options.steady_tol {
                let coeffs = project_window(&cur, 0, window, n, nu, options.n_h);
                let period_factor = period_factor(&coeffs);
                return Ok(SteadyStateEstimate {
                    coeffs,
                    omega,
                    forcing_amplitude: forcing,
                    periodicity_residual: last_residual,
                    period_factor,
                });
            }
        }
        std::mem::swap(&mut prev, &mut cur);
        have_prev = true;
    }
    Err(CoreError::NotSteady(format!(
        "residual {last_residual:.3e} after {} periods",
        options.max_periods
    )))
}

/// Two steady states describe the same attractor when one is a whole-period
/// time shift of the other.
fn same_attractor(a: &SteadyStateEstimate, b: &SteadyStateEstimate, tol: f64) -> bool {
    if a.coeffs.n_h != b.coeffs.n_h || a.coeffs.nu != b.coeffs.nu {
        return false;
    }
    let scale = a.coeffs.data.norm().max(b.coeffs.data.norm()).max(1e-9);
    let nu = a.coeffs.nu;
    for m in 0..nu {
        let shifted = b.coeffs.time_shift(-(TWO_PI * m as f64));
        if (&a.coeffs.data - &shifted.data).norm() <= tol * scale {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_duffing;
    use approx::assert_relative_eq;

    #[test]
    fn zero_forcing_zero_state_stays_zero() {
        let model = build_duffing(1.0, 0.01, 1.0, 1.0, 0.0).unwrap();
        let traj = integrate(
            &model,
            0.0,
            1.0,
            &DVector::zeros(1),
            &DVector::zeros(1),
            5,
            200,
        )
        .unwrap();
        assert_eq!(traj.displacements.abs().max(), 0.0);
    }

    #[test]
    fn rk4_is_fourth_order() {
        // Undamped, unforced linear oscillator against the cos(t) solution.
        let model = build_duffing(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let x0 = DVector::from_vec(vec![1.0]);
        let v0 = DVector::zeros(1);
        let error = |spp: usize| {
            let traj = integrate(&model, 0.0, 1.0, &x0, &v0, 10, spp).unwrap();
            traj.times
                .iter()
                .enumerate()
                .map(|(i, &t)| (traj.displacements[(i, 0)] - t.cos()).abs())
                .fold(0.0f64, f64::max)
        };
        let ratio = error(200) / error(400);
        assert!(
            (10.0..24.0).contains(&ratio),
            "expected ~16x error reduction, got {ratio}"
        );
    }

    #[test]
    fn energy_conserved_without_damping() {
        let model = build_duffing(1.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        let x0 = DVector::from_vec(vec![1.2]);
        let v0 = DVector::from_vec(vec![-0.3]);
        let energy = |x: f64, v: f64| 0.5 * v * v + 0.5 * x * x + 0.25 * x * x * x * x;
        let traj = integrate(&model, 0.0, 1.0, &x0, &v0, 50, 500).unwrap();
        let e0 = energy(1.2, -0.3);
        for i in (0..traj.times.len()).step_by(1000) {
            let e = energy(traj.displacements[(i, 0)], traj.velocities[(i, 0)]);
            assert_relative_eq!(e, e0, max_relative = 1e-7);
        }
    }

    #[test]
    fn linear_resonance_amplitude() {
        // A = f / (c w) = 1.0 at w = w0 = 1 for the linear model.
        let model = build_duffing(1.0, 0.01, 1.0, 0.0, 0.01).unwrap();
        let est = integrate_to_steady(
            &model,
            0.01,
            1.0,
            &DVector::zeros(1),
            &DVector::zeros(1),
            1,
            &SweepOptions {
                steady_tol: 1e-7,
                ..SweepOptions::for_subharmonic(1)
            },
        )
        .unwrap();
        let polar = est.coeffs.amplitude_phase(0, 1);
        assert_relative_eq!(polar.amplitude, 1.0, epsilon = 1e-3);
        assert_relative_eq!(polar.phase, std::f64::consts::FRAC_PI_2, epsilon = 1e-3);
        assert_eq!(est.period_factor, 1);
    }

    #[test]
    fn synthetic_sine_projects_exactly() {
        let omega = 1.3;
        let spp = 400;
        let n_periods = 4;
        let mut xs = DMatrix::zeros(n_periods * spp + 1, 1);
        let mut times = Vec::new();
        let h = TWO_PI / omega / spp as f64;
        for i in 0..=n_periods * spp {
            let t = i as f64 * h;
            times.push(t);
            xs[(i, 0)] = (omega * t).sin();
        }
        let traj = Trajectory {
            times,
            velocities: xs.clone(),
            displacements: xs,
            omega,
            forcing_amplitude: 0.0,
            steps_per_period: spp,
        };
        let est = steady_state_fourier(&traj, 1, 5).unwrap();
        assert_relative_eq!(est.coeffs.sin_coeff(1, 0), 1.0, epsilon = 1e-10);
        for j in 2..=5 {
            assert!(est.coeffs.amplitude_phase(0, j).amplitude < 1e-10);
        }
        assert!(est.coeffs.constant(0).abs() < 1e-10);
    }

    #[test]
    fn linear_system_has_single_attractor() {
        let model = build_duffing(1.0, 0.05, 1.0, 0.0, 0.1).unwrap();
        let result = seed_isola(
            &model,
            0.1,
            0.9,
            1,
            &IcGrid::centered(2.0, 3),
            &SweepOptions {
                steady_tol: 1e-6,
                ..SweepOptions::for_subharmonic(1)
            },
        )
        .unwrap();
        assert_eq!(result.attractors.len(), 1);
        assert!(result.cells.iter().all(|c| c.attractor == Some(0)));
    }
}

