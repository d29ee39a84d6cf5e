//! Newton correction, pseudo-arclength branch tracing and event detection.
//!
//! The tracer is agnostic of what the unknowns mean: a problem exposes `m`
//! residual equations over `m + 1` unknowns, and the tracer closes the system
//! with an orthogonal arclength constraint row. Domain-specific wrappers
//! decide which unknown is the continuation parameter and how to decode
//! points.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

/// Residual and Jacobian of an extended system with one more unknown than
/// equations.
#[derive(Debug, Clone)]
pub struct Extended {
    pub residual: DVector<f64>,
    /// `m x (m + 1)` Jacobian, columns ordered like the unknown vector.
    pub jacobian: DMatrix<f64>,
}

/// A nonlinear system `F(u) = 0` with `u` one dimension larger than `F`.
pub trait ContinuationProblem {
    fn unknowns(&self) -> usize;
    fn eval(&self, u: &DVector<f64>) -> Result<Extended>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationSettings {
    /// Convergence threshold on the residual infinity norm.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub ds_init: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    pub max_points: usize,
    /// Initial direction along the continuation parameter, +1 or -1.
    pub direction: f64,
    /// Desired corrector iteration count for step-size adaptation.
    pub target_iter: usize,
}

impl Default for ContinuationSettings {
    fn default() -> Self {
        Self {
            newton_tol: 1e-10,
            newton_max_iter: 25,
            ds_init: 1e-2,
            ds_min: 1e-8,
            ds_max: 0.1,
            max_points: 2000,
            direction: 1.0,
            target_iter: 4,
        }
    }
}

/// Result of a converged Newton solve.
#[derive(Debug, Clone)]
pub struct Corrected {
    pub u: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Newton iteration on a square system given a closure returning the residual
/// and Jacobian. Convergence is measured in the infinity norm. Steps that
/// increase the residual are backtracked (halved up to a few times) before
/// being taken anyway.
pub fn newton_correct<F>(
    system: &F,
    guess: &DVector<f64>,
    settings: &ContinuationSettings,
) -> Result<Corrected>
where
    F: Fn(&DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    let mut u = guess.clone();
    let mut norm = f64::INFINITY;
    for iter in 0..=settings.newton_max_iter {
        let (residual, jacobian) = system(&u)?;
        norm = residual.amax();
        if !norm.is_finite() {
            return Err(CoreError::NoConvergence {
                iterations: iter,
                residual: norm,
            });
        }
        if norm <= settings.newton_tol {
            return Ok(Corrected {
                u,
                iterations: iter,
                residual_norm: norm,
            });
        }
        if iter == settings.newton_max_iter {
            break;
        }
        let delta = jacobian
            .lu()
            .solve(&(-&residual))
            .ok_or(CoreError::SingularJacobian)?;
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(CoreError::SingularJacobian);
        }
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..6 {
            let candidate = &u + &delta * scale;
            match system(&candidate) {
                Ok((r, _)) if r.amax() < norm => {
                    accepted = Some(candidate);
                    break;
                }
                _ => scale *= 0.5,
            }
        }
        u = accepted.unwrap_or(u + delta);
    }
    Err(CoreError::NoConvergence {
        iterations: settings.newton_max_iter,
        residual: norm,
    })
}

/// One converged point of a raw branch.
#[derive(Debug, Clone)]
pub struct RawPoint {
    pub u: DVector<f64>,
    /// Unit tangent in unknown space, oriented along the branch.
    pub tangent: DVector<f64>,
    /// Cumulative arclength from the branch start.
    pub arclength: f64,
    pub residual_norm: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxPoints,
    ParameterBound,
    StepUnderflow,
    ClosedLoop,
    StopCondition,
}

#[derive(Debug, Clone)]
pub struct RawBranch {
    pub points: Vec<RawPoint>,
    pub termination: Termination,
    /// Set on merged bidirectional traces.
    pub backward_termination: Option<Termination>,
}

impl RawBranch {
    pub fn stalled(&self) -> bool {
        self.termination == Termination::StepUnderflow
            || self.backward_termination == Some(Termination::StepUnderflow)
    }
}

/// Options the tracer needs beyond the numeric settings.
pub struct TraceOptions<'a> {
    /// Index of the continuation parameter inside the unknown vector.
    pub param_index: usize,
    /// Stop once the parameter leaves this window.
    pub param_bounds: Option<(f64, f64)>,
    /// Detect isolas: stop once the branch returns to its starting point.
    pub detect_closed_loop: bool,
    /// Extra termination predicate evaluated on every accepted point.
    pub stop_when: Option<&'a dyn Fn(&RawPoint) -> bool>,
}

impl Default for TraceOptions<'_> {
    fn default() -> Self {
        Self {
            param_index: 0,
            param_bounds: None,
            detect_closed_loop: false,
            stop_when: None,
        }
    }
}

/// Unit tangent of the solution manifold at `u`: the null vector of the
/// `m x (m + 1)` Jacobian, computed from a bordered solve with `border` as
/// the closing row.
fn tangent_at(
    problem: &dyn ContinuationProblem,
    u: &DVector<f64>,
    border: &DVector<f64>,
) -> Result<DVector<f64>> {
    let dim = problem.unknowns();
    let ext = problem.eval(u)?;
    let mut system = DMatrix::zeros(dim, dim);
    system.view_mut((0, 0), (dim - 1, dim)).copy_from(&ext.jacobian);
    system.row_mut(dim - 1).copy_from(&border.transpose());
    let mut rhs = DVector::zeros(dim);
    rhs[dim - 1] = 1.0;
    let t = system
        .lu()
        .solve(&rhs)
        .ok_or(CoreError::SingularJacobian)?;
    let norm = t.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(CoreError::SingularJacobian);
    }
    Ok(t / norm)
}

/// Corrects a prediction back onto the solution manifold, keeping the update
/// orthogonal to `constraint_dir`.
fn correct_orthogonal(
    problem: &dyn ContinuationProblem,
    prediction: &DVector<f64>,
    constraint_dir: &DVector<f64>,
    settings: &ContinuationSettings,
) -> Result<Corrected> {
    let dim = problem.unknowns();
    let closure = |u: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let ext = problem.eval(u)?;
        let mut residual = DVector::zeros(dim);
        residual.rows_mut(0, dim - 1).copy_from(&ext.residual);
        residual[dim - 1] = constraint_dir.dot(&(u - prediction));
        let mut jacobian = DMatrix::zeros(dim, dim);
        jacobian.view_mut((0, 0), (dim - 1, dim)).copy_from(&ext.jacobian);
        jacobian.row_mut(dim - 1).copy_from(&constraint_dir.transpose());
        Ok((residual, jacobian))
    };
    newton_correct(&closure, prediction, settings)
}

/// Newton-corrects `u` onto the manifold while holding the unknown at
/// `fixed_index` constant. Used to converge seeds before tracing.
pub fn correct_at_fixed_param(
    problem: &dyn ContinuationProblem,
    u: &DVector<f64>,
    fixed_index: usize,
    settings: &ContinuationSettings,
) -> Result<Corrected> {
    let dim = problem.unknowns();
    let mut dir = DVector::zeros(dim);
    dir[fixed_index] = 1.0;
    correct_orthogonal(problem, u, &dir, settings)
}

/// Traces a branch by tangent prediction and orthogonal Newton correction.
///
/// The step is halved on corrector failure and grown by 1.3 when the
/// corrector needs fewer than `target_iter` iterations. The start point must
/// already satisfy the residual tolerance.
pub fn continue_branch(
    problem: &dyn ContinuationProblem,
    start: &DVector<f64>,
    settings: &ContinuationSettings,
    options: &TraceOptions,
) -> Result<RawBranch> {
    let dim = problem.unknowns();
    if start.len() != dim {
        return Err(CoreError::DimensionMismatch(format!(
            "start point has {} unknowns, problem expects {dim}",
            start.len()
        )));
    }
    let start_res = problem.eval(start)?.residual.amax();
    if start_res > settings.newton_tol {
        return Err(CoreError::Stall(format!(
            "start point is not converged (residual {start_res:.3e})"
        )));
    }

    // Initial tangent: border with the parameter direction, then orient along
    // the requested sweep direction.
    let mut border = DVector::zeros(dim);
    border[options.param_index] = 1.0;
    let mut tangent = tangent_at(problem, start, &border)?;
    if tangent[options.param_index] * settings.direction < 0.0 {
        tangent.neg_mut();
    }

    let mut points = vec![RawPoint {
        u: start.clone(),
        tangent: tangent.clone(),
        arclength: 0.0,
        residual_norm: start_res,
        newton_iterations: 0,
    }];

    let mut ds = settings.ds_init;
    let mut failures = 0usize;
    const MAX_CONSECUTIVE_FAILURES: usize = 30;

    loop {
        if points.len() >= settings.max_points {
            return Ok(RawBranch {
                points,
                termination: Termination::MaxPoints,
                backward_termination: None,
            });
        }
        let prev = points.last().expect("branch holds at least the start");
        let prediction = &prev.u + &prev.tangent * ds;
        match correct_orthogonal(problem, &prediction, &prev.tangent, settings) {
            Ok(corrected) => {
                // Large corrections or sharp tangent rotations mean the
                // corrector landed on a neighboring branch segment; shrink
                // the step instead of accepting the jump.
                let correction = (&corrected.u - &prediction).norm();
                let mut new_tangent = match tangent_at(problem, &corrected.u, &prev.tangent) {
                    Ok(t) => t,
                    Err(_) => prev.tangent.clone(),
                };
                if new_tangent.dot(&prev.tangent) < 0.0 {
                    new_tangent.neg_mut();
                }
                let rotation = new_tangent.dot(&prev.tangent);
                if correction > 0.5 * ds || rotation < 0.5 {
                    failures += 1;
                    ds *= 0.5;
                    if ds < settings.ds_min || failures >= MAX_CONSECUTIVE_FAILURES {
                        return Ok(RawBranch {
                            points,
                            termination: Termination::StepUnderflow,
                            backward_termination: None,
                        });
                    }
                    continue;
                }
                let arclength = prev.arclength + (&corrected.u - &prev.u).norm();
                let point = RawPoint {
                    u: corrected.u,
                    tangent: new_tangent,
                    arclength,
                    residual_norm: corrected.residual_norm,
                    newton_iterations: corrected.iterations,
                };
                failures = 0;
                let iterations = point.newton_iterations;

                let value = point.u[options.param_index];
                let out_of_bounds = options
                    .param_bounds
                    .map(|(lo, hi)| value < lo - 1e-12 || value > hi + 1e-12)
                    .unwrap_or(false);
                let closes_loop = options.detect_closed_loop
                    && points.len() >= 8
                    && (&point.u - &points[0].u).norm() < ds
                    && point.tangent.dot(&points[0].tangent) > 0.0;
                let stop_requested = options.stop_when.map(|f| f(&point)).unwrap_or(false);

                points.push(point);

                if out_of_bounds {
                    return Ok(RawBranch {
                        points,
                        termination: Termination::ParameterBound,
                        backward_termination: None,
                    });
                }
                if closes_loop {
                    return Ok(RawBranch {
                        points,
                        termination: Termination::ClosedLoop,
                        backward_termination: None,
                    });
                }
                if stop_requested {
                    return Ok(RawBranch {
                        points,
                        termination: Termination::StopCondition,
                        backward_termination: None,
                    });
                }
                if iterations < settings.target_iter && rotation > 0.995 {
                    ds = (ds * 1.3).min(settings.ds_max);
                }
            }
            Err(CoreError::NoConvergence { .. }) | Err(CoreError::SingularJacobian) => {
                failures += 1;
                ds *= 0.5;
                if ds < settings.ds_min || failures >= MAX_CONSECUTIVE_FAILURES {
                    return Ok(RawBranch {
                        points,
                        termination: Termination::StepUnderflow,
                        backward_termination: None,
                    });
                }
            }
            Err(other) => return Err(other),
        }
    }
}

/// Traces both directions from a converged start and merges the result into
/// one branch running backward-to-forward, with consistent tangents and
/// rebuilt arclengths. When the forward trace already closes a loop the
/// backward sweep is skipped.
pub fn trace_bidirectional(
    problem: &dyn ContinuationProblem,
    start: &DVector<f64>,
    settings: &ContinuationSettings,
    options: &TraceOptions,
) -> Result<RawBranch> {
    let forward = continue_branch(problem, start, settings, options)?;
    if forward.termination == Termination::ClosedLoop {
        return Ok(forward);
    }
    let backward_settings = ContinuationSettings {
        direction: -settings.direction,
        ..*settings
    };
    let backward = continue_branch(problem, start, &backward_settings, options)?;

    let mut points = Vec::with_capacity(backward.points.len() + forward.points.len());
    for mut p in backward.points.into_iter().skip(1).rev() {
        p.tangent.neg_mut();
        points.push(p);
    }
    points.extend(forward.points);
    let mut s = 0.0;
    for i in 0..points.len() {
        if i > 0 {
            s += (&points[i].u - &points[i - 1].u).norm();
        }
        points[i].arclength = s;
    }
    Ok(RawBranch {
        points,
        termination: forward.termination,
        backward_termination: Some(backward.termination),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    PhaseTarget,
    AmplitudeMax,
    Fold,
    GainTurning,
    LevelCrossing,
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::PhaseTarget => "phase_target",
            EventKind::AmplitudeMax => "amplitude_max",
            EventKind::Fold => "fold",
            EventKind::GainTurning => "feq_turning",
            EventKind::LevelCrossing => "level_crossing",
        }
    }
}

/// Which monitor sign changes count as events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EventSign {
    #[default]
    Any,
    /// Only positive-to-negative crossings, e.g. maxima of a quantity whose
    /// arclength derivative is monitored.
    FallingOnly,
}

/// A scalar monitor evaluated at branch points; `None` marks the monitor as
/// undefined there (e.g. the phase of a vanished harmonic), which masks the
/// surrounding intervals from event scanning.
pub struct EventSpec<'a> {
    pub kind: EventKind,
    pub monitor: Box<dyn Fn(&RawPoint) -> Option<f64> + 'a>,
    pub sign: EventSign,
}

#[derive(Debug, Clone)]
pub struct BranchEvent {
    pub kind: EventKind,
    pub point: RawPoint,
    /// False when bisection failed to drive the monitor below tolerance.
    pub refined: bool,
}

/// Tolerance on refined event monitors.
pub const EVENT_REFINE_TOL: f64 = 1e-8;

/// Scans a branch for monitor sign changes and refines each bracket by
/// bisection on arclength with fresh Newton corrections. All events are
/// reported in branch order; none is designated principal.
pub fn detect_events(
    problem: &dyn ContinuationProblem,
    branch: &RawBranch,
    specs: &[EventSpec],
    settings: &ContinuationSettings,
) -> Result<Vec<BranchEvent>> {
    let mut events = Vec::new();
    for spec in specs {
        for pair in branch.points.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let (Some(ma), Some(mb)) = ((spec.monitor)(a), (spec.monitor)(b)) else {
                continue;
            };
            if ma == 0.0 {
                // Exact hit on a grid point; report it directly (the pair
                // scan never revisits `a`).
                if spec.sign == EventSign::Any || mb < 0.0 {
                    events.push(BranchEvent {
                        kind: spec.kind,
                        point: a.clone(),
                        refined: true,
                    });
                }
                continue;
            }
            if spec.sign == EventSign::FallingOnly && !(ma > 0.0 && mb < 0.0) {
                continue;
            }
            if ma * mb < 0.0 {
                let (point, refined) = refine_event(problem, a, b, &spec.monitor, settings)?;
                events.push(BranchEvent {
                    kind: spec.kind,
                    point,
                    refined,
                });
            }
        }
    }
    events.sort_by(|x, y| {
        x.point
            .arclength
            .partial_cmp(&y.point.arclength)
            .expect("finite arclengths")
    });
    // Collapse duplicates: brackets on both sides of a grid point refine to
    // the same solution.
    let mut unique: Vec<BranchEvent> = Vec::with_capacity(events.len());
    for ev in events {
        let duplicate = unique.iter().any(|kept| {
            kept.kind == ev.kind
                && (&kept.point.u - &ev.point.u).norm() < 1e-6 * (1.0 + ev.point.u.norm())
        });
        if !duplicate {
            unique.push(ev);
        }
    }
    Ok(unique)
}

fn refine_event(
    problem: &dyn ContinuationProblem,
    a: &RawPoint,
    b: &RawPoint,
    monitor: &dyn Fn(&RawPoint) -> Option<f64>,
    settings: &ContinuationSettings,
) -> Result<(RawPoint, bool)> {
    const MAX_BISECTIONS: usize = 80;
    let mut lo = a.clone();
    let mut hi = b.clone();
    let mut f_lo = monitor(&lo).expect("bracket endpoints have valid monitors");
    let mut f_hi = monitor(&hi).expect("bracket endpoints have valid monitors");
    let mut best = if f_lo.abs() < f_hi.abs() { lo.clone() } else { hi.clone() };
    let mut best_val = f_lo.abs().min(f_hi.abs());

    for _ in 0..MAX_BISECTIONS {
        if best_val < EVENT_REFINE_TOL {
            return Ok((best, true));
        }
        let denom = f_hi - f_lo;
        // False-position estimate, clamped away from the bracket ends.
        let theta = if denom.abs() > 1e-300 {
            (-f_lo / denom).clamp(0.2, 0.8)
        } else {
            0.5
        };
        let secant = &hi.u - &lo.u;
        let secant_norm = secant.norm();
        if secant_norm < 1e-15 {
            break;
        }
        let dir = secant / secant_norm;
        let prediction = &lo.u + (&hi.u - &lo.u) * theta;
        let corrected = match correct_orthogonal(problem, &prediction, &dir, settings) {
            Ok(c) => c,
            Err(CoreError::NoConvergence { .. }) | Err(CoreError::SingularJacobian) => break,
            Err(other) => return Err(other),
        };
        let mut tangent = match tangent_at(problem, &corrected.u, &dir) {
            Ok(t) => t,
            Err(_) => break,
        };
        if tangent.dot(&lo.tangent) < 0.0 {
            tangent.neg_mut();
        }
        let arclength = lo.arclength + (hi.arclength - lo.arclength) * theta;
        let mid = RawPoint {
            u: corrected.u,
            tangent,
            arclength,
            residual_norm: corrected.residual_norm,
            newton_iterations: corrected.iterations,
        };
        let Some(f_mid) = monitor(&mid) else { break };
        if f_mid.abs() < best_val {
            best_val = f_mid.abs();
            best = mid.clone();
        }
        if f_mid * f_lo > 0.0 {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
            f_hi = f_mid;
        }
    }
    Ok((best, best_val < EVENT_REFINE_TOL))
}
