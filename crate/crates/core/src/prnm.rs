//! Phase resonance nonlinear modes.
//!
//! The harmonic forcing is replaced by a velocity feedback built from the
//! k-th harmonic of the response at the driven DOF: the harmonic is filtered
//! out of the velocity, re-read as a signal at the forcing frequency, and
//! (when `k` or `nu` is even) delayed so that the enforced phase lag becomes
//! `3 pi / (4 nu)` instead of quadrature. Continuing the resulting system in
//! the excitation frequency, with the feedback gain as the extra unknown,
//! traces the locus of phase resonance directly.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};

use crate::aft::AftEngine;
use crate::continuation::{
    self, ContinuationProblem, ContinuationSettings, EventKind, EventSign, EventSpec, Extended,
    RawBranch, RawPoint, Termination, TraceOptions,
};
use crate::error::{CoreError, Result};
use crate::hbm::{
    build_dynamic_stiffness, build_grad_operator, dynamic_stiffness_domega, HarmonicGrid,
    HarmonicVector, TWO_PI,
};
use crate::model::SystemModel;

/// A `k:nu` resonance target: harmonic `k` on the `nu`-subharmonic grid,
/// driven and sensed at one DOF.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResonanceSpec {
    pub k: usize,
    pub nu: usize,
    pub forcing_dof: usize,
}

impl ResonanceSpec {
    pub fn new(k: usize, nu: usize, forcing_dof: usize) -> Result<Self> {
        if k == 0 || nu == 0 {
            return Err(CoreError::InvalidSpec("k and nu must be positive".into()));
        }
        if gcd(k, nu) != 1 {
            return Err(CoreError::InvalidSpec(format!(
                "k = {k} and nu = {nu} must be relatively prime"
            )));
        }
        Ok(Self { k, nu, forcing_dof })
    }

    pub fn both_odd(&self) -> bool {
        self.k % 2 == 1 && self.nu % 2 == 1
    }

    /// Phase lag enforced at resonance: `pi/2` when both `k` and `nu` are
    /// odd, `3 pi / (4 nu)` otherwise.
    pub fn target_phase(&self) -> f64 {
        if self.both_odd() {
            FRAC_PI_2
        } else {
            3.0 * PI / (4.0 * self.nu as f64)
        }
    }

    /// Rotation angle `alpha * w` of the delay. Independent of the frequency:
    /// `alpha = (1/w_k)(pi/2 - 3 pi/(4 nu))` and `w_k = k w / nu`, so
    /// `alpha w = (nu/k)(pi/2 - 3 pi/(4 nu))`.
    pub fn rotation_angle(&self) -> f64 {
        if self.both_odd() {
            0.0
        } else {
            self.nu as f64 / self.k as f64 * (FRAC_PI_2 - 3.0 * PI / (4.0 * self.nu as f64))
        }
    }

    /// Feedback delay in seconds at the given excitation frequency.
    pub fn delay(&self, omega: f64) -> f64 {
        self.rotation_angle() / omega
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Feedback delay `alpha`: zero for odd/odd specs, otherwise
/// `(nu / (k w)) (pi/2 - 3 pi/(4 nu))`.
pub fn resonance_delay(spec: &ResonanceSpec, omega: f64) -> f64 {
    spec.delay(omega)
}

/// Harmonic filter `T_f`: keeps only the two coefficients of grid harmonic
/// `k`.
pub fn harmonic_filter(spec: &ResonanceSpec, n_h: usize) -> DMatrix<f64> {
    let m = 2 * n_h + 1;
    let mut t = DMatrix::zeros(m, m);
    t[(2 * spec.k - 1, 2 * spec.k - 1)] = 1.0;
    t[(2 * spec.k, 2 * spec.k)] = 1.0;
    t
}

/// Period map `T_T`: re-reads the coefficient pair of grid harmonic `k`
/// (frequency `w_k`) as the pair of grid harmonic `nu` (frequency `w`).
pub fn period_map(spec: &ResonanceSpec, n_h: usize) -> DMatrix<f64> {
    let m = 2 * n_h + 1;
    let mut t = DMatrix::zeros(m, m);
    t[(2 * spec.nu - 1, 2 * spec.k - 1)] = 1.0;
    t[(2 * spec.nu, 2 * spec.k)] = 1.0;
    t
}

/// Delay rotation `R_alpha`: rotates the pair at grid harmonic `nu` by the
/// angle `alpha w` and annihilates everything else.
pub fn delay_rotation(spec: &ResonanceSpec, n_h: usize) -> DMatrix<f64> {
    let m = 2 * n_h + 1;
    let mut r = DMatrix::zeros(m, m);
    let angle = spec.rotation_angle();
    let (s, c) = angle.sin_cos();
    r[(2 * spec.nu - 1, 2 * spec.nu - 1)] = c;
    r[(2 * spec.nu - 1, 2 * spec.nu)] = s;
    r[(2 * spec.nu, 2 * spec.nu - 1)] = -s;
    r[(2 * spec.nu, 2 * spec.nu)] = c;
    r
}

/// Full feedback operator `(R_alpha T_T T_f grad(w)) x I_l`, mapping
/// displacement coefficients to the Fourier coefficients of the delayed,
/// T-periodic k-th harmonic velocity at the driven DOF.
pub fn build_feedback_operator(
    spec: &ResonanceSpec,
    grid: &HarmonicGrid,
    n_dofs: usize,
) -> Result<DMatrix<f64>> {
    if spec.k > grid.n_h || spec.nu > grid.n_h {
        return Err(CoreError::InvalidSpec(format!(
            "harmonic {} or subharmonic order {} exceeds the grid ({} harmonics)",
            spec.k, spec.nu, grid.n_h
        )));
    }
    if spec.nu != grid.nu {
        return Err(CoreError::InvalidSpec(format!(
            "spec subharmonic order {} does not match the grid ({})",
            spec.nu, grid.nu
        )));
    }
    if spec.forcing_dof >= n_dofs {
        return Err(CoreError::InvalidSpec("feedback DOF out of range".into()));
    }
    let basis_op = delay_rotation(spec, grid.n_h)
        * period_map(spec, grid.n_h)
        * harmonic_filter(spec, grid.n_h)
        * build_grad_operator(grid);
    let mut selector = DMatrix::zeros(n_dofs, n_dofs);
    selector[(spec.forcing_dof, spec.forcing_dof)] = 1.0;
    Ok(basis_op.kronecker(&selector))
}

/// Residual of the feedback-driven system, with analytic Jacobians with
/// respect to the coefficients, the gain and the frequency. The last residual
/// row is the phase condition `s_k = 0` at the driven DOF.
#[derive(Debug, Clone)]
pub struct PrnmResidual {
    pub residual: DVector<f64>,
    pub jacobian_x: DMatrix<f64>,
    pub jacobian_gain: DVector<f64>,
    pub jacobian_omega: DVector<f64>,
}

pub fn prnm_residual(
    model: &SystemModel,
    x: &HarmonicVector,
    gain: f64,
    grid: &HarmonicGrid,
    spec: &ResonanceSpec,
    aft: &AftEngine,
) -> Result<PrnmResidual> {
    let n = model.dof_count();
    let m0 = grid.basis_len() * n;
    if x.len() != m0 {
        return Err(CoreError::DimensionMismatch(
            "coefficient vector does not match the grid".into(),
        ));
    }
    let a = build_dynamic_stiffness(model, grid);
    let feedback = build_feedback_operator(spec, grid, n)?;
    let (f_nl, df_dx) = aft.nonlinear_terms(model, x)?;

    let feedback_x = &feedback * &x.data;
    let balance = &a * &x.data + f_nl - &feedback_x * gain;

    let phase_row_index = x.idx_sin(spec.k, spec.forcing_dof);
    let mut residual = DVector::zeros(m0 + 1);
    residual.rows_mut(0, m0).copy_from(&balance);
    residual[m0] = x.data[phase_row_index];

    let mut jacobian_x = DMatrix::zeros(m0 + 1, m0);
    jacobian_x
        .view_mut((0, 0), (m0, m0))
        .copy_from(&(a + df_dx - &feedback * gain));
    jacobian_x[(m0, phase_row_index)] = 1.0;

    let mut jacobian_gain = DVector::zeros(m0 + 1);
    jacobian_gain.rows_mut(0, m0).copy_from(&(-&feedback_x));

    // The rotation angle alpha*w is frequency independent, so the feedback
    // operator scales like grad(w): dB/dw = B / w.
    let da = dynamic_stiffness_domega(model, grid);
    let mut jacobian_omega = DVector::zeros(m0 + 1);
    jacobian_omega
        .rows_mut(0, m0)
        .copy_from(&(da * &x.data - feedback_x * (gain / grid.omega)));

    Ok(PrnmResidual {
        residual,
        jacobian_x,
        jacobian_gain,
        jacobian_omega,
    })
}

/// Continuation problem over the unknowns `[X, gain, omega]`.
pub struct PrnmProblem<'a> {
    pub model: &'a SystemModel,
    pub spec: ResonanceSpec,
    pub n_h: usize,
    pub aft: AftEngine,
}

impl<'a> PrnmProblem<'a> {
    pub fn new(model: &'a SystemModel, spec: ResonanceSpec, n_h: usize) -> Result<Self> {
        let grid = HarmonicGrid::new(n_h, spec.nu, 1.0)?;
        let aft = AftEngine::with_default_samples(model, &grid)?;
        Ok(Self {
            model,
            spec,
            n_h,
            aft,
        })
    }

    pub fn coeff_len(&self) -> usize {
        (2 * self.n_h + 1) * self.model.dof_count()
    }

    pub fn gain_index(&self) -> usize {
        self.coeff_len()
    }

    pub fn omega_index(&self) -> usize {
        self.coeff_len() + 1
    }

    pub fn pack(&self, coeffs: &HarmonicVector, gain: f64, omega: f64) -> DVector<f64> {
        let m0 = self.coeff_len();
        let mut u = DVector::zeros(m0 + 2);
        u.rows_mut(0, m0).copy_from(&coeffs.data);
        u[m0] = gain;
        u[m0 + 1] = omega;
        u
    }

    pub fn unpack(&self, u: &DVector<f64>) -> (HarmonicVector, f64, f64) {
        let m0 = self.coeff_len();
        let coeffs = HarmonicVector {
            n_dofs: self.model.dof_count(),
            n_h: self.n_h,
            nu: self.spec.nu,
            data: u.rows(0, m0).clone_owned(),
        };
        (coeffs, u[m0], u[m0 + 1])
    }
}

impl ContinuationProblem for PrnmProblem<'_> {
    fn unknowns(&self) -> usize {
        self.coeff_len() + 2
    }

    fn eval(&self, u: &DVector<f64>) -> Result<Extended> {
        let (coeffs, gain, omega) = self.unpack(u);
        if !(omega > 0.0) {
            // a corrector wandered out of the physical domain
            return Err(CoreError::NoConvergence {
                iterations: 0,
                residual: f64::INFINITY,
            });
        }
        let grid = HarmonicGrid::new(self.n_h, self.spec.nu, omega)?;
        let rep = prnm_residual(self.model, &coeffs, gain, &grid, &self.spec, &self.aft)?;
        let m0 = self.coeff_len();
        let mut jacobian = DMatrix::zeros(m0 + 1, m0 + 2);
        jacobian
            .view_mut((0, 0), (m0 + 1, m0))
            .copy_from(&rep.jacobian_x);
        jacobian.set_column(m0, &rep.jacobian_gain);
        jacobian.set_column(m0 + 1, &rep.jacobian_omega);
        Ok(Extended {
            residual: rep.residual,
            jacobian,
        })
    }
}

/// Initial guess for the feedback-driven system, built from one point of a
/// classical frequency response branch.
#[derive(Debug, Clone)]
pub struct PrnmSeed {
    pub coeffs: HarmonicVector,
    pub gain: f64,
    pub omega: f64,
}

/// Rotates an NFRC point until harmonic `k` at the driven DOF has `s_k = 0`
/// and `c_k < 0`, and derives the starting gain `-f / c_k`.
pub fn init_from_nfrc_point(
    coeffs: &HarmonicVector,
    omega: f64,
    forcing: f64,
    spec: &ResonanceSpec,
) -> Result<PrnmSeed> {
    let polar = coeffs.amplitude_phase(spec.forcing_dof, spec.k);
    if polar.degenerate || polar.amplitude <= 0.0 {
        return Err(CoreError::DegenerateSeed(format!(
            "harmonic {} vanishes at DOF {}",
            spec.k, spec.forcing_dof
        )));
    }
    if !(forcing > 0.0) {
        return Err(CoreError::DegenerateSeed(
            "seed forcing amplitude must be positive".into(),
        ));
    }
    // Time shift rotating the (s_k, c_k) pair onto (0, -A_k); harmonic j
    // co-rotates by j/k times the angle.
    let s = coeffs.sin_coeff(spec.k, spec.forcing_dof);
    let c = coeffs.cos_coeff(spec.k, spec.forcing_dof);
    let beta_k = c.atan2(s) + FRAC_PI_2;
    let theta = spec.nu as f64 * beta_k / spec.k as f64;
    let mut rotated = coeffs.time_shift(theta);
    // The rotation lands on s_k = 0 up to roundoff; pin it exactly so the
    // phase-condition row starts satisfied.
    rotated.set_sin(spec.k, spec.forcing_dof, 0.0);
    let c_k = rotated.cos_coeff(spec.k, spec.forcing_dof);
    debug_assert!(c_k < 0.0);
    Ok(PrnmSeed {
        coeffs: rotated,
        gain: -forcing / c_k,
        omega,
    })
}

/// One converged point of the feedback-driven branch.
#[derive(Debug, Clone)]
pub struct PrnmPoint {
    pub coeffs: HarmonicVector,
    pub omega: f64,
    /// Feedback gain (kg/s).
    pub gain: f64,
    /// Equivalent classical forcing amplitude `gain * w_k * A_k` (N).
    pub f_eq: f64,
    pub arclength: f64,
    pub residual_norm: f64,
}

#[derive(Debug, Clone)]
pub struct PrnmBranch {
    pub spec: ResonanceSpec,
    pub points: Vec<PrnmPoint>,
    /// Turning points of the equivalent forcing along the branch, refined to
    /// `d f_eq / ds = 0`.
    pub turning_points: Vec<PrnmPoint>,
    pub termination: Termination,
}

impl PrnmBranch {
    /// Number of sign changes of `f_eq(s) - level` along the branch; three
    /// intersections signal an isolated resonance on top of the main peak.
    pub fn level_crossings(&self, level: f64) -> usize {
        self.points
            .windows(2)
            .filter(|w| (w[0].f_eq - level) * (w[1].f_eq - level) < 0.0)
            .count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PrnmTraceOptions {
    pub omega_bounds: Option<(f64, f64)>,
    /// Trace both directions from the seed and merge. Needed for isolas,
    /// whose two phase resonance points straddle the seed.
    pub bidirectional: bool,
}

impl Default for PrnmTraceOptions {
    fn default() -> Self {
        Self {
            omega_bounds: None,
            bidirectional: true,
        }
    }
}

/// Equivalent classical forcing amplitude of a converged point, `mu w_k A_k`.
pub fn equivalent_forcing(
    coeffs: &HarmonicVector,
    gain: f64,
    omega: f64,
    spec: &ResonanceSpec,
) -> f64 {
    let amplitude = coeffs.amplitude_phase(spec.forcing_dof, spec.k).amplitude;
    gain * spec.k as f64 * omega / spec.nu as f64 * amplitude
}

/// Re-expresses a feedback-driven orbit in the time reference of classical
/// forcing `f_eq sin(w t)`: the feedback equals `f_eq sin(w (t - alpha))`, so
/// the orbit is advanced by the delay.
pub fn forced_equivalent(coeffs: &HarmonicVector, spec: &ResonanceSpec) -> HarmonicVector {
    coeffs.time_shift(-spec.rotation_angle())
}

/// Retrieves the phase lag of harmonic `k` with the delay and time-reference
/// corrections, wrapped to `[0, 2 pi)`.
pub fn retrieve_phase_lag(
    x: &HarmonicVector,
    spec: &ResonanceSpec,
    grid: &HarmonicGrid,
) -> Result<f64> {
    let polar = x.amplitude_phase(spec.forcing_dof, spec.k);
    if polar.degenerate {
        return Err(CoreError::DegenerateSeed(format!(
            "harmonic {} vanishes at DOF {}",
            spec.k, spec.forcing_dof
        )));
    }
    let s = x.sin_coeff(spec.k, spec.forcing_dof);
    let c = x.cos_coeff(spec.k, spec.forcing_dof);
    let raw = (-c).atan2(s);
    let omega_k = grid.omega_j(spec.k);
    let alpha = spec.delay(grid.omega);
    let ratio = omega_k / grid.omega;
    let phi = raw - omega_k * alpha - ratio * (raw - FRAC_PI_2);
    Ok(phi.rem_euclid(TWO_PI))
}

/// Companion orbit `y(t) = -x(t + T/2)`: a solution of the same forced
/// system (the nonlinearities are odd), with the phase lag of harmonic `k`
/// moved by `pi - k pi / nu`.
pub fn companion_solution(x: &HarmonicVector, _spec: &ResonanceSpec) -> HarmonicVector {
    x.time_shift(-PI).negated()
}

/// Continues a feedback-driven branch in the excitation frequency from a
/// converged seed. Points violating the gain/phase sign conventions terminate
/// the trace.
pub fn continue_prnm(
    model: &SystemModel,
    spec: &ResonanceSpec,
    seed: &PrnmSeed,
    settings: &ContinuationSettings,
    options: &PrnmTraceOptions,
) -> Result<PrnmBranch> {
    let problem = PrnmProblem::new(model, *spec, seed.coeffs.n_h)?;
    let u0 = problem.pack(&seed.coeffs, seed.gain, seed.omega);
    let corrected =
        continuation::correct_at_fixed_param(&problem, &u0, problem.omega_index(), settings)?;
    let (coeffs, gain, _) = problem.unpack(&corrected.u);
    if gain <= 0.0 {
        return Err(CoreError::DegenerateSeed(format!(
            "seed converged to non-positive gain {gain:.3e}"
        )));
    }
    if coeffs.cos_coeff(spec.k, spec.forcing_dof) >= 0.0 {
        return Err(CoreError::DegenerateSeed(
            "seed converged with the wrong phase sign (c_k >= 0)".into(),
        ));
    }

    let sin_index = coeffs.idx_sin(spec.k, spec.forcing_dof);
    let cos_index = coeffs.idx_cos(spec.k, spec.forcing_dof);
    let gain_index = problem.gain_index();
    let stop_when = move |p: &RawPoint| p.u[gain_index] <= 0.0 || p.u[cos_index] >= 0.0;

    let trace_options = TraceOptions {
        param_index: problem.omega_index(),
        param_bounds: options.omega_bounds,
        detect_closed_loop: true,
        stop_when: Some(&stop_when),
    };
    let traced = if options.bidirectional {
        continuation::trace_bidirectional(&problem, &corrected.u, settings, &trace_options)?
    } else {
        continuation::continue_branch(&problem, &corrected.u, settings, &trace_options)?
    };
    let termination = traced.termination;
    let mut raw_points = traced.points;

    // Drop trailing points past a sign violation (the stop predicate includes
    // the offending point in the raw trace).
    while let Some(last) = raw_points.last() {
        if last.u[gain_index] <= 0.0 || last.u[cos_index] >= 0.0 {
            raw_points.pop();
        } else {
            break;
        }
    }
    if raw_points.len() < 2 {
        return Err(CoreError::Stall(
            "feedback branch collapsed to fewer than two points".into(),
        ));
    }

    let decode = |p: &RawPoint| -> PrnmPoint {
        let (coeffs, gain, omega) = problem.unpack(&p.u);
        let f_eq = equivalent_forcing(&coeffs, gain, omega, spec);
        PrnmPoint {
            coeffs,
            omega,
            gain,
            f_eq,
            arclength: p.arclength,
            residual_norm: p.residual_norm,
        }
    };
    let points: Vec<PrnmPoint> = raw_points.iter().map(&decode).collect();

    // Turning points of the equivalent forcing, located where its arclength
    // derivative changes sign.
    let omega_index = problem.omega_index();
    let spec_copy = *spec;
    let problem_ref = &problem;
    let feq_rate = move |p: &RawPoint| -> Option<f64> {
        let (coeffs, gain, omega) = problem_ref.unpack(&p.u);
        let polar = coeffs.amplitude_phase(spec_copy.forcing_dof, spec_copy.k);
        if polar.amplitude < 1e-12 {
            return None;
        }
        let s = coeffs.sin_coeff(spec_copy.k, spec_copy.forcing_dof);
        let c = coeffs.cos_coeff(spec_copy.k, spec_copy.forcing_dof);
        let ratio = spec_copy.k as f64 / spec_copy.nu as f64;
        let da_ds = (s * p.tangent[sin_index] + c * p.tangent[cos_index]) / polar.amplitude;
        let dmu_ds = p.tangent[gain_index];
        let domega_ds = p.tangent[omega_index];
        Some(
            dmu_ds * ratio * omega * polar.amplitude
                + gain * ratio * domega_ds * polar.amplitude
                + gain * ratio * omega * da_ds,
        )
    };
    let raw_branch = RawBranch {
        points: raw_points,
        termination,
        backward_termination: traced.backward_termination,
    };
    let specs = [EventSpec {
        kind: EventKind::GainTurning,
        monitor: Box::new(feq_rate),
        sign: EventSign::Any,
    }];
    let turning_points = continuation::detect_events(&problem, &raw_branch, &specs, settings)?
        .into_iter()
        .map(|ev| decode(&ev.point))
        .collect();

    Ok(PrnmBranch {
        spec: *spec,
        points,
        turning_points,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_duffing;
    use approx::assert_relative_eq;

    #[test]
    fn spec_validation_and_targets() {
        assert!(ResonanceSpec::new(2, 4, 0).is_err());
        assert!(ResonanceSpec::new(0, 1, 0).is_err());
        let spec = ResonanceSpec::new(1, 1, 0).unwrap();
        assert_relative_eq!(spec.target_phase(), FRAC_PI_2);
        let spec = ResonanceSpec::new(2, 1, 0).unwrap();
        assert_relative_eq!(spec.target_phase(), 3.0 * PI / 4.0);
        let spec = ResonanceSpec::new(1, 2, 0).unwrap();
        assert_relative_eq!(spec.target_phase(), 3.0 * PI / 8.0);
    }

    #[test]
    fn delay_values() {
        let spec = ResonanceSpec::new(3, 1, 0).unwrap();
        assert_eq!(resonance_delay(&spec, 0.7), 0.0);

        let spec = ResonanceSpec::new(1, 2, 0).unwrap();
        for omega in [0.5, 1.0, 2.2] {
            assert_relative_eq!(resonance_delay(&spec, omega), PI / (4.0 * omega));
        }

        let spec = ResonanceSpec::new(2, 1, 0).unwrap();
        assert_relative_eq!(resonance_delay(&spec, 1.0), -PI / 8.0);
    }

    #[test]
    fn feedback_operator_primary_case_is_filtered_velocity() {
        // k = nu = 1: the feedback is exactly the first harmonic of the
        // velocity at the driven DOF.
        let spec = ResonanceSpec::new(1, 1, 0).unwrap();
        let grid = HarmonicGrid::new(5, 1, 1.3).unwrap();
        let b = build_feedback_operator(&spec, &grid, 1).unwrap();
        let mut x = HarmonicVector::zeros(5, 1, 1);
        x.set_sin(1, 0, 2.0);
        x.set_cos(3, 0, 1.0);
        let out = b * &x.data;
        // velocity of 2 sin(1.3 t) is 2.6 cos(1.3 t); harmonic 3 filtered out
        assert_relative_eq!(out[x.idx_cos(1, 0)], 2.6, epsilon = 1e-14);
        assert_eq!(out.iter().filter(|&&v| v.abs() > 1e-14).count(), 1);
    }

    #[test]
    fn feedback_operator_even_subharmonic_pipeline() {
        // k = 1, nu = 2: (s_1, c_1) = (a, 0) maps to a slot-2 signal of
        // amplitude w a / 2 rotated by pi/4.
        let spec = ResonanceSpec::new(1, 2, 0).unwrap();
        let omega = 1.8;
        let grid = HarmonicGrid::new(8, 2, omega).unwrap();
        let b = build_feedback_operator(&spec, &grid, 1).unwrap();
        let a = 0.9;
        let mut x = HarmonicVector::zeros(8, 2, 1);
        x.set_sin(1, 0, a);
        let out = b * &x.data;
        let s2 = out[x.idx_sin(2, 0)];
        let c2 = out[x.idx_cos(2, 0)];
        assert_relative_eq!(s2.hypot(c2), omega * a / 2.0, epsilon = 1e-14);
        // everything outside slot 2 vanishes
        let mut masked = out.clone();
        masked[x.idx_sin(2, 0)] = 0.0;
        masked[x.idx_cos(2, 0)] = 0.0;
        assert!(masked.norm() < 1e-14);
        // velocity pair (0, w1 a) rotated by pi/4
        let expect_s = std::f64::consts::FRAC_PI_4.sin() * (omega / 2.0) * a;
        let expect_c = std::f64::consts::FRAC_PI_4.cos() * (omega / 2.0) * a;
        assert_relative_eq!(s2, expect_s, epsilon = 1e-14);
        assert_relative_eq!(c2, expect_c, epsilon = 1e-14);
    }

    #[test]
    fn operator_algebra_properties() {
        let spec = ResonanceSpec::new(3, 2, 0).unwrap();
        let n_h = 8;
        let t_f = harmonic_filter(&spec, n_h);
        assert_relative_eq!((&t_f * &t_f - &t_f).norm(), 0.0);

        // R_alpha is orthogonal on its active block.
        let r = delay_rotation(&spec, n_h);
        let block = r
            .view((2 * spec.nu - 1, 2 * spec.nu - 1), (2, 2))
            .clone_owned();
        let eye = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(
            (block.transpose() * block - eye).norm(),
            0.0,
            epsilon = 1e-15
        );

        // Applying the full operator twice annihilates (k != nu): the image
        // lives in slot nu, which the k-selective filter kills.
        let grid = HarmonicGrid::new(n_h, 2, 0.9).unwrap();
        let b = build_feedback_operator(&spec, &grid, 2).unwrap();
        assert!((&b * &b).norm() < 1e-14);
    }

    #[test]
    fn linear_primary_resonance_solves_exactly() {
        // Linear oscillator: X with only c_1 < 0 at w = w0 and gain = c
        // satisfies the feedback-driven system exactly.
        let model = build_duffing(1.0, 0.01, 1.0, 0.0, 0.0).unwrap();
        let spec = ResonanceSpec::new(1, 1, 0).unwrap();
        let grid = HarmonicGrid::new(8, 1, 1.0).unwrap();
        let aft = AftEngine::with_default_samples(&model, &grid).unwrap();
        let mut x = HarmonicVector::zeros(8, 1, 1);
        x.set_cos(1, 0, -1.0);
        let rep = prnm_residual(&model, &x, 0.01, &grid, &spec, &aft).unwrap();
        assert!(rep.residual.amax() < 1e-15);

        // the trivial solution is always a root
        let zero = HarmonicVector::zeros(8, 1, 1);
        let rep = prnm_residual(&model, &zero, 0.37, &grid, &spec, &aft).unwrap();
        assert_eq!(rep.residual.amax(), 0.0);
    }

    #[test]
    fn prnm_jacobians_match_finite_differences() {
        let model = build_duffing(1.0, 0.01, 1.0, 1.0, 0.0).unwrap();
        let spec = ResonanceSpec::new(1, 2, 0).unwrap();
        let problem = PrnmProblem::new(&model, spec, 6).unwrap();
        let mut x = HarmonicVector::zeros(6, 2, 1);
        for i in 0..x.len() {
            x.data[i] = 0.3 * ((i + 1) as f64 * 0.7).sin();
        }
        let u = problem.pack(&x, 0.12, 0.83);
        let ext = problem.eval(&u).unwrap();
        let h = 1e-7;
        for col in 0..problem.unknowns() {
            let mut up = u.clone();
            up[col] += h;
            let mut um = u.clone();
            um[col] -= h;
            let fp = problem.eval(&up).unwrap().residual;
            let fm = problem.eval(&um).unwrap().residual;
            let fd = (fp - fm) / (2.0 * h);
            for row in 0..fd.len() {
                assert_relative_eq!(
                    ext.jacobian[(row, col)],
                    fd[row],
                    epsilon = 1e-6,
                    max_relative = 1e-5
                );
            }
        }
    }

    #[test]
    fn init_rotation_and_gain() {
        let spec = ResonanceSpec::new(1, 1, 0).unwrap();
        let mut x = HarmonicVector::zeros(4, 1, 1);
        x.set_cos(1, 0, -0.5);
        let seed = init_from_nfrc_point(&x, 1.0, 0.25, &spec).unwrap();
        assert_relative_eq!(seed.gain, 0.5);
        assert_relative_eq!((&seed.coeffs.data - &x.data).norm(), 0.0, epsilon = 1e-15);

        let mut x = HarmonicVector::zeros(4, 1, 1);
        x.set_sin(1, 0, 1.0);
        let seed = init_from_nfrc_point(&x, 1.0, 0.25, &spec).unwrap();
        assert_relative_eq!(seed.coeffs.sin_coeff(1, 0), 0.0);
        assert_relative_eq!(seed.coeffs.cos_coeff(1, 0), -1.0, epsilon = 1e-15);

        let zero = HarmonicVector::zeros(4, 1, 1);
        assert!(init_from_nfrc_point(&zero, 1.0, 0.25, &spec).is_err());
    }

    #[test]
    fn phase_lag_retrieval_hits_targets() {
        // At a converged point (s_k = 0, c_k < 0) the retrieved lag equals
        // the target for any spec parity.
        for (k, nu) in [(1, 1), (3, 1), (2, 1), (1, 2), (1, 3), (3, 2), (4, 3)] {
            let spec = ResonanceSpec::new(k, nu, 0).unwrap();
            let n_h = 8 * nu;
            let grid = HarmonicGrid::new(n_h, nu, 0.77).unwrap();
            let mut x = HarmonicVector::zeros(n_h, nu, 1);
            x.set_cos(k, 0, -0.4);
            let phi = retrieve_phase_lag(&x, &spec, &grid).unwrap();
            assert_relative_eq!(phi, spec.target_phase(), epsilon = 1e-12);
        }
    }

    #[test]
    fn companion_is_involution_for_harmonic_grids() {
        let spec = ResonanceSpec::new(2, 1, 0).unwrap();
        let mut x = HarmonicVector::zeros(6, 1, 1);
        for i in 0..x.len() {
            x.data[i] = ((i * 3 + 1) as f64 * 0.41).cos();
        }
        let twice = companion_solution(&companion_solution(&x, &spec), &spec);
        assert_relative_eq!((&twice.data - &x.data).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn companion_preserves_peak_amplitude() {
        let spec = ResonanceSpec::new(1, 2, 0).unwrap();
        let mut x = HarmonicVector::zeros(8, 2, 1);
        for i in 0..x.len() {
            x.data[i] = ((i + 2) as f64 * 0.29).sin() * 0.3;
        }
        let companion = companion_solution(&x, &spec);
        // sample counts divisible by 2 nu keep the shifted lattice aligned
        let a = x.peak_displacements(1024);
        let b = companion.peak_displacements(1024);
        assert_relative_eq!(a[0], b[0], epsilon = 1e-12);
    }

    #[test]
    fn equivalent_forcing_formula() {
        let spec = ResonanceSpec::new(3, 1, 0).unwrap();
        let mut x = HarmonicVector::zeros(8, 1, 1);
        x.set_cos(3, 0, -0.2);
        assert_relative_eq!(equivalent_forcing(&x, 0.05, 1.2, &spec), 0.05 * 3.6 * 0.2);
        assert_eq!(equivalent_forcing(&x, 0.0, 1.2, &spec), 0.0);
    }
}
