//! Branch-level orchestration shared by the command-line tool and the test
//! suites: the forced-response continuation problem, NFRC tracing with event
//! detection, seeding helpers and cross-checks between the feedback-driven
//! and classically forced formulations.

use nalgebra::{DMatrix, DVector};

use crate::aft::AftEngine;
use crate::continuation::{
    self, BranchEvent, ContinuationProblem, ContinuationSettings, EventKind, EventSign, EventSpec,
    Extended, RawBranch, RawPoint, Termination, TraceOptions,
};
use crate::error::{CoreError, Result};
use crate::hbm::{
    self, external_forcing, hbm_residual_forced, wrap_phase_diff, HarmonicGrid, HarmonicVector,
};
use crate::model::SystemModel;
use crate::oracle::{self, IcGrid, SweepOptions};
use crate::prnm::{self, PrnmSeed, ResonanceSpec};

/// Classical forced-response continuation problem over `[X, omega]`.
pub struct ForcedHbmProblem<'a> {
    pub model: &'a SystemModel,
    pub nu: usize,
    pub n_h: usize,
    pub aft: AftEngine,
}

impl<'a> ForcedHbmProblem<'a> {
    pub fn new(model: &'a SystemModel, nu: usize, n_h: usize) -> Result<Self> {
        let grid = HarmonicGrid::new(n_h, nu, 1.0)?;
        let aft = AftEngine::with_default_samples(model, &grid)?;
        Ok(Self {
            model,
            nu,
            n_h,
            aft,
        })
    }

    pub fn coeff_len(&self) -> usize {
        (2 * self.n_h + 1) * self.model.dof_count()
    }

    pub fn omega_index(&self) -> usize {
        self.coeff_len()
    }

    pub fn pack(&self, coeffs: &HarmonicVector, omega: f64) -> DVector<f64> {
        let m0 = self.coeff_len();
        let mut u = DVector::zeros(m0 + 1);
        u.rows_mut(0, m0).copy_from(&coeffs.data);
        u[m0] = omega;
        u
    }

    pub fn unpack(&self, u: &DVector<f64>) -> (HarmonicVector, f64) {
        let m0 = self.coeff_len();
        let coeffs = HarmonicVector {
            n_dofs: self.model.dof_count(),
            n_h: self.n_h,
            nu: self.nu,
            data: u.rows(0, m0).clone_owned(),
        };
        (coeffs, u[m0])
    }
}

impl ContinuationProblem for ForcedHbmProblem<'_> {
    fn unknowns(&self) -> usize {
        self.coeff_len() + 1
    }

    fn eval(&self, u: &DVector<f64>) -> Result<Extended> {
        let (coeffs, omega) = self.unpack(u);
        if !(omega > 0.0) {
            return Err(CoreError::NoConvergence {
                iterations: 0,
                residual: f64::INFINITY,
            });
        }
        let grid = HarmonicGrid::new(self.n_h, self.nu, omega)?;
        let rep = hbm_residual_forced(self.model, &coeffs, &grid, &self.aft)?;
        let m0 = self.coeff_len();
        let mut jacobian = DMatrix::zeros(m0, m0 + 1);
        jacobian.view_mut((0, 0), (m0, m0)).copy_from(&rep.jacobian_x);
        jacobian.set_column(m0, &rep.jacobian_param);
        Ok(Extended {
            residual: rep.residual,
            jacobian,
        })
    }
}

/// Solution of the underlying linear system at one frequency, used to start
/// frequency sweeps.
pub fn linear_response(model: &SystemModel, grid: &HarmonicGrid) -> Result<HarmonicVector> {
    let a = hbm::build_dynamic_stiffness(model, grid);
    let f_ext = external_forcing(model, grid);
    let x = a.lu().solve(&f_ext).ok_or(CoreError::SingularJacobian)?;
    HarmonicVector::from_data(grid.n_h, grid.nu, model.dof_count(), x)
}

/// One converged point of a forced-response branch.
#[derive(Debug, Clone)]
pub struct BranchPoint {
    pub coeffs: HarmonicVector,
    pub omega: f64,
    pub arclength: f64,
    pub residual_norm: f64,
}

#[derive(Debug, Clone)]
pub struct NfrcEvent {
    pub kind: EventKind,
    pub point: BranchPoint,
    pub refined: bool,
}

#[derive(Debug, Clone)]
pub struct NfrcBranch {
    pub forcing: f64,
    pub nu: usize,
    pub n_h: usize,
    pub points: Vec<BranchPoint>,
    pub events: Vec<NfrcEvent>,
    pub termination: Termination,
    pub stalled: bool,
}

/// Settings for one NFRC computation.
#[derive(Debug, Clone, Copy)]
pub struct NfrcOptions {
    pub nu: usize,
    /// Harmonic count; 0 selects the 8*nu default.
    pub n_h: usize,
    pub omega_range: (f64, f64),
    /// Resonance whose harmonic is monitored for events.
    pub spec: Option<ResonanceSpec>,
    /// Harmonic amplitudes below this are treated as dead for phase events.
    pub amp_floor: f64,
}

impl NfrcOptions {
    pub fn primary(omega_range: (f64, f64)) -> Self {
        Self {
            nu: 1,
            n_h: 0,
            omega_range,
            spec: None,
            amp_floor: 1e-9,
        }
    }

    pub fn resolved_n_h(&self) -> usize {
        if self.n_h == 0 {
            8 * self.nu
        } else {
            self.n_h
        }
    }
}

fn decode_forced(problem: &ForcedHbmProblem, p: &RawPoint) -> BranchPoint {
    let (coeffs, omega) = problem.unpack(&p.u);
    BranchPoint {
        coeffs,
        omega,
        arclength: p.arclength,
        residual_norm: p.residual_norm,
    }
}

/// Event monitors for a forced branch: phase-target crossings and amplitude
/// extrema of the resonant harmonic at the driven DOF, plus folds.
fn forced_event_specs<'a>(
    problem: &'a ForcedHbmProblem,
    spec: &ResonanceSpec,
    amp_floor: f64,
) -> Vec<EventSpec<'a>> {
    let dof = spec.forcing_dof;
    let k = spec.k;
    let target = spec.target_phase();
    let n = problem.model.dof_count();
    let sin_index = (2 * k - 1) * n + dof;
    let cos_index = 2 * k * n + dof;
    let omega_index = problem.omega_index();

    let phase = move |p: &RawPoint| -> Option<f64> {
        let s = p.u[sin_index];
        let c = p.u[cos_index];
        let polar = hbm::harmonic_polar(s, c);
        if polar.amplitude < amp_floor {
            None
        } else {
            Some(wrap_phase_diff(polar.phase - target))
        }
    };
    let amplitude_rate = move |p: &RawPoint| -> Option<f64> {
        let s = p.u[sin_index];
        let c = p.u[cos_index];
        let a = s.hypot(c);
        if a < amp_floor {
            None
        } else {
            Some((s * p.tangent[sin_index] + c * p.tangent[cos_index]) / a)
        }
    };
    let fold = move |p: &RawPoint| -> Option<f64> { Some(p.tangent[omega_index]) };

    vec![
        EventSpec {
            kind: EventKind::PhaseTarget,
            monitor: Box::new(phase),
            sign: EventSign::Any,
        },
        EventSpec {
            kind: EventKind::AmplitudeMax,
            monitor: Box::new(amplitude_rate),
            sign: EventSign::FallingOnly,
        },
        EventSpec {
            kind: EventKind::Fold,
            monitor: Box::new(fold),
            sign: EventSign::Any,
        },
    ]
}

fn assemble_nfrc(
    problem: &ForcedHbmProblem,
    raw: RawBranch,
    forcing: f64,
    options: &NfrcOptions,
    settings: &ContinuationSettings,
) -> Result<NfrcBranch> {
    let spec = options
        .spec
        .map(Ok)
        .unwrap_or_else(|| ResonanceSpec::new(options.nu, options.nu, problem.model.forcing_dof()))?;
    let specs = forced_event_specs(problem, &spec, options.amp_floor);
    let events = continuation::detect_events(problem, &raw, &specs, settings)?
        .into_iter()
        .map(|ev: BranchEvent| NfrcEvent {
            kind: ev.kind,
            point: decode_forced(problem, &ev.point),
            refined: ev.refined,
        })
        .collect();
    let points = raw.points.iter().map(|p| decode_forced(problem, p)).collect();
    Ok(NfrcBranch {
        forcing,
        nu: options.nu,
        n_h: problem.n_h,
        points,
        events,
        termination: raw.termination,
        stalled: raw.stalled(),
    })
}

/// Traces the main forced-response branch across a frequency window, starting
/// from the linear response at the lower edge.
pub fn nfrc_sweep(
    model: &SystemModel,
    forcing: f64,
    options: &NfrcOptions,
    settings: &ContinuationSettings,
) -> Result<NfrcBranch> {
    let model = model.with_forcing_amplitude(forcing)?;
    let n_h = options.resolved_n_h();
    let problem = ForcedHbmProblem::new(&model, options.nu, n_h)?;
    let (lo, hi) = options.omega_range;
    if !(lo > 0.0 && hi > lo) {
        return Err(CoreError::InvalidSettings(
            "frequency window must satisfy 0 < lo < hi".into(),
        ));
    }
    let grid = HarmonicGrid::new(n_h, options.nu, lo)?;
    let guess = linear_response(&model, &grid)?;
    let u0 = problem.pack(&guess, lo);
    let corrected =
        continuation::correct_at_fixed_param(&problem, &u0, problem.omega_index(), settings)?;
    let trace_options = TraceOptions {
        param_index: problem.omega_index(),
        param_bounds: Some((lo, hi)),
        detect_closed_loop: false,
        stop_when: None,
    };
    let raw = continuation::continue_branch(&problem, &corrected.u, settings, &trace_options)?;
    assemble_nfrc(&problem, raw, forcing, options, settings)
}

/// Traces a forced-response branch from an explicit converged seed, walking
/// both directions and detecting isola closure. Used for branches that are
/// disconnected from the main curve.
pub fn nfrc_from_seed(
    model: &SystemModel,
    forcing: f64,
    seed: &HarmonicVector,
    omega: f64,
    options: &NfrcOptions,
    settings: &ContinuationSettings,
) -> Result<NfrcBranch> {
    let model = model.with_forcing_amplitude(forcing)?;
    let n_h = options.resolved_n_h();
    if seed.n_h != n_h || seed.nu != options.nu {
        return Err(CoreError::DimensionMismatch(
            "seed grid does not match the requested NFRC grid".into(),
        ));
    }
    let problem = ForcedHbmProblem::new(&model, options.nu, n_h)?;
    let u0 = problem.pack(seed, omega);
    let corrected =
        continuation::correct_at_fixed_param(&problem, &u0, problem.omega_index(), settings)?;
    let trace_options = TraceOptions {
        param_index: problem.omega_index(),
        param_bounds: Some(options.omega_range),
        detect_closed_loop: true,
        stop_when: None,
    };
    let raw =
        continuation::trace_bidirectional(&problem, &corrected.u, settings, &trace_options)?;
    assemble_nfrc(&problem, raw, forcing, options, settings)
}

/// Newton-corrects a coefficient guess onto the forced branch at fixed
/// frequency.
pub fn correct_forced(
    model: &SystemModel,
    forcing: f64,
    coeffs: &HarmonicVector,
    omega: f64,
    settings: &ContinuationSettings,
) -> Result<(HarmonicVector, usize, f64)> {
    let model = model.with_forcing_amplitude(forcing)?;
    let problem = ForcedHbmProblem::new(&model, coeffs.nu, coeffs.n_h)?;
    let u0 = problem.pack(coeffs, omega);
    let corrected =
        continuation::correct_at_fixed_param(&problem, &u0, problem.omega_index(), settings)?;
    let (out, _) = problem.unpack(&corrected.u);
    Ok((out, corrected.iterations, corrected.residual_norm))
}

/// Re-converges a feedback-driven orbit under classical forcing at its
/// equivalent amplitude, returning the Newton iteration count and the final
/// residual norm. Converged phase resonance modes are actual forced orbits,
/// so this should succeed within a couple of iterations.
pub fn forced_reconvergence(
    model: &SystemModel,
    point: &prnm::PrnmPoint,
    spec: &ResonanceSpec,
    settings: &ContinuationSettings,
) -> Result<(HarmonicVector, usize, f64)> {
    let aligned = prnm::forced_equivalent(&point.coeffs, spec);
    let (coeffs, iterations, residual) =
        correct_forced(model, point.f_eq, &aligned, point.omega, settings)?;
    Ok((coeffs, iterations, residual))
}

/// Distance of a coefficient vector from an NFRC branch, measured as the
/// minimum over branch segments of the distance in `(X, omega)` space after
/// linear interpolation. Used to check that feedback-driven points lie on
/// classically computed branches.
pub fn branch_distance(branch: &NfrcBranch, coeffs: &HarmonicVector, omega: f64) -> f64 {
    let mut best = f64::INFINITY;
    for pair in branch.points.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let seg = &b.coeffs.data - &a.coeffs.data;
        let seg_omega = b.omega - a.omega;
        let rel = &coeffs.data - &a.coeffs.data;
        let rel_omega = omega - a.omega;
        let denom = seg.norm_squared() + seg_omega * seg_omega;
        let t = if denom > 0.0 {
            ((seg.dot(&rel) + seg_omega * rel_omega) / denom).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let dx = rel - seg * t;
        let domega = rel_omega - seg_omega * t;
        best = best.min((dx.norm_squared() + domega * domega).sqrt());
    }
    best
}

/// Picks a PRNM seed from an NFRC branch: the refined phase-target event if
/// one exists, otherwise the point with the largest resonant-harmonic
/// amplitude.
pub fn prnm_seed_from_nfrc(
    branch: &NfrcBranch,
    spec: &ResonanceSpec,
    forcing: f64,
) -> Result<PrnmSeed> {
    let event_point = branch
        .events
        .iter()
        .find(|ev| ev.kind == EventKind::PhaseTarget && ev.refined)
        .map(|ev| &ev.point);
    let point = match event_point {
        Some(p) => p,
        None => branch
            .points
            .iter()
            .max_by(|a, b| {
                let aa = a.coeffs.amplitude_phase(spec.forcing_dof, spec.k).amplitude;
                let bb = b.coeffs.amplitude_phase(spec.forcing_dof, spec.k).amplitude;
                aa.partial_cmp(&bb).expect("finite amplitudes")
            })
            .ok_or_else(|| CoreError::DegenerateSeed("empty branch".into()))?,
    };
    prnm::init_from_nfrc_point(&point.coeffs, point.omega, forcing, spec)
}

/// Searches a time-integration sweep for an attractor carrying the requested
/// resonance and corrects it onto the forced branch. The sweep replaces the
/// basin-of-attraction computation needed to reach isolated branches.
pub fn seed_from_sweep(
    model: &SystemModel,
    forcing: f64,
    omega: f64,
    spec: &ResonanceSpec,
    grid: &IcGrid,
    sweep: &SweepOptions,
    settings: &ContinuationSettings,
) -> Result<HarmonicVector> {
    let result = oracle::seed_isola(model, forcing, omega, spec.nu, grid, sweep)?;
    // The resonant slot must dominate the subharmonic content, otherwise the
    // attractor belongs to a different k':nu resonance whose sidebands leak
    // into slot k.
    let dominant = |est: &oracle::SteadyStateEstimate| -> bool {
        let a_k = est
            .coeffs
            .amplitude_phase(spec.forcing_dof, spec.k)
            .amplitude;
        if a_k <= 1e-6 {
            return false;
        }
        let mut max_other: f64 = 0.0;
        for j in 1..=est.coeffs.n_h {
            if j == spec.k || j % spec.nu == 0 {
                continue;
            }
            max_other = max_other.max(
                est.coeffs
                    .amplitude_phase(spec.forcing_dof, j)
                    .amplitude,
            );
        }
        a_k >= 0.8 * max_other
    };
    let mut candidates: Vec<&oracle::SteadyStateEstimate> =
        result.attractors.iter().filter(|est| dominant(est)).collect();
    candidates.sort_by(|a, b| {
        let aa = a.coeffs.amplitude_phase(spec.forcing_dof, spec.k).amplitude;
        let bb = b.coeffs.amplitude_phase(spec.forcing_dof, spec.k).amplitude;
        bb.partial_cmp(&aa).expect("finite amplitudes")
    });
    for est in candidates {
        if let Ok((coeffs, _, _)) = correct_forced(model, forcing, &est.coeffs, omega, settings) {
            let amp = coeffs.amplitude_phase(spec.forcing_dof, spec.k).amplitude;
            if amp > 1e-6 {
                return Ok(coeffs);
            }
        }
    }
    Err(CoreError::DegenerateSeed(format!(
        "no attractor with {}:{} content found at f = {forcing}, omega = {omega}",
        spec.k, spec.nu
    )))
}

/// Starts a feedback-driven branch from a forced orbit, retrying the
/// alignment degeneracy: for harmonic `k` the condition `s_k = 0, c_k < 0`
/// admits `k` distinct time alignments, and only some of them lie in the
/// Newton basin of the feedback-driven solution. The starting gain guess is
/// additionally retried with a `1 / w_k` rescale, which compensates strongly
/// shifted resonances.
pub fn prnm_from_orbit(
    model: &SystemModel,
    spec: &ResonanceSpec,
    coeffs: &HarmonicVector,
    omega: f64,
    forcing: f64,
    settings: &ContinuationSettings,
    options: &prnm::PrnmTraceOptions,
) -> Result<prnm::PrnmBranch> {
    let mut last_err = None;
    for m in 0..spec.k {
        let theta = hbm::TWO_PI * (m * spec.nu) as f64 / spec.k as f64;
        let rotated = coeffs.time_shift(theta);
        let base = match prnm::init_from_nfrc_point(&rotated, omega, forcing, spec) {
            Ok(seed) => seed,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let omega_k = spec.k as f64 * omega / spec.nu as f64;
        let gains = [base.gain, base.gain / omega_k];
        for gain in gains {
            let seed = PrnmSeed {
                coeffs: base.coeffs.clone(),
                gain,
                omega,
            };
            match prnm::continue_prnm(model, spec, &seed, settings, options) {
                Ok(branch) => return Ok(branch),
                Err(e @ (CoreError::NoConvergence { .. } | CoreError::DegenerateSeed(_))) => {
                    last_err = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        // Direct correction failed for this alignment; walk a defect
        // homotopy from the (exactly satisfied) seed system to the true
        // feedback-driven system.
        for gain in gains {
            let seed = PrnmSeed {
                coeffs: base.coeffs.clone(),
                gain,
                omega,
            };
            match prnm_seed_homotopy(model, spec, &seed, settings) {
                Ok(corrected) => {
                    match prnm::continue_prnm(model, spec, &corrected, settings, options) {
                        Ok(branch) => return Ok(branch),
                        Err(e @ (CoreError::NoConvergence { .. } | CoreError::DegenerateSeed(_))) => {
                            last_err = Some(e);
                        }
                        Err(e) => return Err(e),
                    }
                }
                Err(e @ (CoreError::NoConvergence { .. } | CoreError::Stall(_))) => {
                    last_err = Some(e)
                }
                Err(e) => return Err(e),
            }
        }
    }
    Err(last_err.unwrap_or_else(|| CoreError::DegenerateSeed("no seed candidate".into())))
}

/// Full seeding pipeline for resonances that live away from the main branch:
/// trace the forced branch through the converged orbit, refine its
/// phase-target crossing (where the rotated orbit satisfies the
/// feedback-driven system exactly) and start the PRNM continuation there.
/// Falls back to direct orbit seeding when no crossing is found.
pub fn prnm_via_forced_branch(
    model: &SystemModel,
    spec: &ResonanceSpec,
    coeffs: &HarmonicVector,
    omega: f64,
    forcing: f64,
    nfrc_options: &NfrcOptions,
    settings: &ContinuationSettings,
    options: &prnm::PrnmTraceOptions,
) -> Result<prnm::PrnmBranch> {
    let mut nfrc_options = *nfrc_options;
    nfrc_options.spec = Some(*spec);
    nfrc_options.nu = spec.nu;
    // The phase-target monitor only fires on the time-shift family whose lag
    // passes near the target.
    let coeffs = canonicalize_family(coeffs, spec);
    let branch = nfrc_from_seed(model, forcing, &coeffs, omega, &nfrc_options, settings)?;
    let event = branch
        .events
        .iter()
        .filter(|ev| ev.kind == EventKind::PhaseTarget && ev.refined)
        .min_by(|a, b| {
            let aa = (a.point.omega - omega).abs();
            let bb = (b.point.omega - omega).abs();
            aa.partial_cmp(&bb).expect("finite frequencies")
        });
    match event {
        Some(ev) => {
            let seed =
                prnm::init_from_nfrc_point(&ev.point.coeffs, ev.point.omega, forcing, spec)?;
            prnm::continue_prnm(model, spec, &seed, settings, options)
        }
        None => prnm_from_orbit(model, spec, &coeffs, omega, forcing, settings, options),
    }
}

/// Deforms the residual `R(u) - (1 - lambda) R(u0)` from `lambda = 0`, where
/// the seed solves it exactly, to `lambda = 1`, the feedback-driven system,
/// applying Newton at fixed frequency after each step.
fn prnm_seed_homotopy(
    model: &SystemModel,
    spec: &ResonanceSpec,
    seed: &PrnmSeed,
    settings: &ContinuationSettings,
) -> Result<PrnmSeed> {
    let problem = prnm::PrnmProblem::new(model, *spec, seed.coeffs.n_h)?;
    let dim = problem.unknowns();
    let omega_index = problem.omega_index();
    let mut u = problem.pack(&seed.coeffs, seed.gain, seed.omega);
    let defect = problem.eval(&u)?.residual;

    let mut lambda: f64 = 0.0;
    let mut step: f64 = 0.25;
    while lambda < 1.0 {
        let target = (lambda + step).min(1.0);
        let shrink = 1.0 - target;
        let system = |v: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
            let ext = problem.eval(v)?;
            let mut residual = DVector::zeros(dim);
            residual
                .rows_mut(0, dim - 1)
                .copy_from(&(&ext.residual - &defect * shrink));
            residual[dim - 1] = v[omega_index] - seed.omega;
            let mut jacobian = DMatrix::zeros(dim, dim);
            jacobian
                .view_mut((0, 0), (dim - 1, dim))
                .copy_from(&ext.jacobian);
            jacobian[(dim - 1, omega_index)] = 1.0;
            Ok((residual, jacobian))
        };
        match continuation::newton_correct(&system, &u, settings) {
            Ok(corrected) => {
                u = corrected.u;
                lambda = target;
                step = (step * 1.5).min(1.0 - lambda + 1e-16);
            }
            Err(CoreError::NoConvergence { .. }) | Err(CoreError::SingularJacobian) => {
                step *= 0.5;
                if step < 1e-4 {
                    return Err(CoreError::Stall(format!(
                        "seed homotopy stalled at lambda = {lambda:.4}"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    let (coeffs, gain, omega) = problem.unpack(&u);
    Ok(PrnmSeed {
        coeffs,
        gain,
        omega,
    })
}

/// Seeds a `k:nu` orbit without basin sweeps: superimpose the linear driven
/// response with a resonant harmonic whose amplitude comes from the hardening
/// backbone estimate, scan its phase, and Newton-correct the forced system at
/// fixed frequency. Reaches orbits that are unstable in time integration.
pub fn seed_by_phase_scan(
    model: &SystemModel,
    spec: &ResonanceSpec,
    forcing: f64,
    omega: f64,
    n_h: usize,
    settings: &ContinuationSettings,
) -> Result<HarmonicVector> {
    let model = model.with_forcing_amplitude(forcing)?;
    let grid = HarmonicGrid::new(n_h, spec.nu, omega)?;
    // Nonlinear T-periodic driven base; Newton preserves the harmonic
    // subspace of multiples of nu, so this carries no subharmonic content.
    let linear = linear_response(&model, &grid)?;
    let driven = match correct_forced(&model, forcing, &linear, omega, settings) {
        Ok((x, _, _)) => x,
        Err(_) => linear,
    };
    let dof = spec.forcing_dof;
    let lambda = driven.amplitude_phase(dof, grid.nu).amplitude;

    // Hardening backbone estimate for the resonant harmonic amplitude:
    // w_k = w0 (1 + 3 k_nl (a^2/8 + lambda^2/4) / k_lin), with the cross term
    // from the coexisting driven component.
    let omega_k = grid.omega_j(spec.k);
    let k_lin = model.stiffness()[(dof, dof)];
    let m_lin = model.mass()[(dof, dof)];
    let omega0 = (k_lin / m_lin).sqrt();
    let k_nl: f64 = model
        .nonlinear_terms()
        .iter()
        .filter(|t| t.target == dof && t.source == dof && t.exponent == 3)
        .map(|t| t.coefficient)
        .sum();
    let mut amplitudes = vec![0.3, 0.7, 1.5, 2.5];
    if k_nl > 0.0 {
        let detune = (omega_k / omega0 - 1.0) * k_lin / k_nl - 0.75 * lambda * lambda;
        if detune > 0.0 {
            let backbone = (8.0 * detune / 3.0).sqrt();
            amplitudes = vec![backbone, 0.7 * backbone, 1.3 * backbone, 0.4 * backbone];
        }
    }

    for amplitude in amplitudes {
        for i in 0..8 {
            let phase = hbm::TWO_PI * i as f64 / 8.0;
            let mut guess = driven.clone();
            let (s, c) = (amplitude * phase.cos(), -amplitude * phase.sin());
            guess.set_sin(spec.k, dof, s);
            guess.set_cos(spec.k, dof, c);
            // Large-amplitude free vibrations of a hardening spring carry a
            // third harmonic of a few percent; include it in the guess.
            if 3 * spec.k <= n_h && k_nl > 0.0 {
                let delta = c.atan2(s);
                let eps = 0.04 * amplitude;
                guess.set_sin(3 * spec.k, dof, -eps * (3.0 * delta).cos());
                guess.set_cos(3 * spec.k, dof, -eps * (3.0 * delta).sin());
            }
            let Ok((corrected, _, _)) = correct_forced(&model, forcing, &guess, omega, settings)
            else {
                continue;
            };
            let a_k = corrected.amplitude_phase(dof, spec.k).amplitude;
            if a_k < 0.05 {
                continue;
            }
            let mut max_other: f64 = 0.0;
            for j in 1..=n_h {
                if j == spec.k || j % spec.nu == 0 {
                    continue;
                }
                max_other = max_other.max(corrected.amplitude_phase(dof, j).amplitude);
            }
            if a_k >= 0.8 * max_other {
                return Ok(corrected);
            }
        }
    }
    Err(CoreError::DegenerateSeed(format!(
        "phase scan found no {}:{} orbit at f = {forcing}, omega = {omega}",
        spec.k, spec.nu
    )))
}

/// Rotates a subharmonic solution into the time-shift family whose phase lag
/// at harmonic `k` is closest to the spec target, optionally passing through
/// the sign-flipped companion. NFRC phase taxonomy statements refer to this
/// canonical family.
pub fn canonicalize_family(x: &HarmonicVector, spec: &ResonanceSpec) -> HarmonicVector {
    let target = spec.target_phase();
    let mut best = x.clone();
    let mut best_err = f64::INFINITY;
    let mut consider = |candidate: HarmonicVector| {
        let polar = candidate.amplitude_phase(spec.forcing_dof, spec.k);
        if polar.degenerate {
            return;
        }
        let err = wrap_phase_diff(polar.phase - target).abs();
        if err < best_err {
            best_err = err;
            best = candidate;
        }
    };
    for m in 0..spec.nu {
        let shifted = x.time_shift(-(hbm::TWO_PI * m as f64));
        consider(prnm::companion_solution(&shifted, spec));
        consider(shifted);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_duffing, build_two_dof};
    use approx::assert_relative_eq;

    fn tight() -> ContinuationSettings {
        ContinuationSettings::default()
    }

    #[test]
    fn linear_response_matches_closed_form() {
        // Complex FRF route: x = f / (k - m w^2 + i c w), amplitude and lag.
        let model = build_duffing(1.0, 0.01, 1.0, 0.0, 0.01).unwrap();
        for omega in [0.3, 0.9, 1.0, 1.4] {
            let grid = HarmonicGrid::new(8, 1, omega).unwrap();
            let x = linear_response(&model, &grid).unwrap();
            let denom_re = 1.0 - omega * omega;
            let denom_im = 0.01 * omega;
            let amp = 0.01 / denom_re.hypot(denom_im);
            let polar = x.amplitude_phase(0, 1);
            assert_relative_eq!(polar.amplitude, amp, epsilon = 1e-12);
            let expected_phase = denom_im.atan2(denom_re).rem_euclid(hbm::TWO_PI);
            assert_relative_eq!(polar.phase, expected_phase, epsilon = 1e-10);
        }
    }

    #[test]
    fn linear_branch_reproduces_frf_everywhere() {
        let model = build_duffing(1.0, 0.01, 1.0, 0.0, 0.01).unwrap();
        let options = NfrcOptions::primary((0.5, 1.5));
        let branch = nfrc_sweep(&model, 0.01, &options, &tight()).unwrap();
        assert!(branch.points.len() > 20);
        for p in &branch.points {
            let denom_re = 1.0 - p.omega * p.omega;
            let denom_im = 0.01 * p.omega;
            let amp = 0.01 / denom_re.hypot(denom_im);
            assert_relative_eq!(
                p.coeffs.amplitude_phase(0, 1).amplitude,
                amp,
                epsilon = 1e-10,
                max_relative = 1e-8
            );
        }
        // quadrature exactly at the natural frequency
        let quad = branch
            .events
            .iter()
            .find(|e| e.kind == EventKind::PhaseTarget)
            .expect("quadrature event");
        assert_relative_eq!(quad.point.omega, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn duffing_hardening_peak_has_two_folds() {
        let model = build_duffing(1.0, 0.01, 1.0, 1.0, 0.01).unwrap();
        let options = NfrcOptions::primary((0.8, 1.3));
        let branch = nfrc_sweep(&model, 0.01, &options, &tight()).unwrap();
        let folds: Vec<_> = branch
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Fold)
            .collect();
        assert_eq!(folds.len(), 2, "hardening peak should carry a fold pair");
        for f in &folds {
            assert!(f.refined);
        }
    }

    #[test]
    fn two_dof_linear_sweep() {
        let model = build_two_dof(0.001).unwrap();
        let options = NfrcOptions::primary((0.5, 1.9));
        let branch = nfrc_sweep(&model, 0.001, &options, &tight()).unwrap();
        // both primary resonances produce quadrature crossings of phi_1
        let quads: Vec<_> = branch
            .events
            .iter()
            .filter(|e| e.kind == EventKind::PhaseTarget)
            .collect();
        assert!(quads.len() >= 2);
        assert!(quads.iter().any(|e| (e.point.omega - 1.0).abs() < 5e-3));
        // non-proportional damping shifts the mode-2 crossing slightly below
        // sqrt(3)
        assert!(quads
            .iter()
            .any(|e| (e.point.omega - 3.0f64.sqrt()).abs() < 1e-2));
    }
}
