//! Harmonic balance on a subharmonic Fourier grid.
//!
//! The response is expanded as
//! `x(t) = c0/sqrt(2) + sum_j (s_j sin(w_j t) + c_j cos(w_j t))` with
//! `w_j = j w / nu`, so a grid with subharmonic order `nu` represents motion
//! with period `nu * T` under forcing of period `T = 2 pi / w`. Coefficients
//! are stored basis-major (all DOFs of the constant block, then all DOFs of
//! the first sine block, ...), which lets frequency-domain operators be built
//! as Kronecker products with the DOF-space matrices.

use nalgebra::{DMatrix, DVector};

use crate::aft::AftEngine;
use crate::error::{CoreError, Result};
use crate::model::SystemModel;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Truncated subharmonic Fourier grid: `n_h` harmonics of the base frequency
/// `w / nu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicGrid {
    pub n_h: usize,
    pub nu: usize,
    pub omega: f64,
}

impl HarmonicGrid {
    pub fn new(n_h: usize, nu: usize, omega: f64) -> Result<Self> {
        if nu == 0 {
            return Err(CoreError::InvalidGrid("nu must be >= 1".into()));
        }
        if n_h < nu {
            return Err(CoreError::InvalidGrid(format!(
                "n_h = {n_h} cannot represent the forcing harmonic j = nu = {nu}"
            )));
        }
        if !(omega > 0.0) {
            return Err(CoreError::InvalidGrid("omega must be positive".into()));
        }
        Ok(Self { n_h, nu, omega })
    }

    /// Frequency of grid harmonic `j`.
    pub fn omega_j(&self, j: usize) -> f64 {
        j as f64 * self.omega / self.nu as f64
    }

    /// Forcing period `T`.
    pub fn forcing_period(&self) -> f64 {
        TWO_PI / self.omega
    }

    /// Least common period of the grid, `nu * T`.
    pub fn grid_period(&self) -> f64 {
        self.nu as f64 * self.forcing_period()
    }

    /// Number of basis functions, `2 n_h + 1`.
    pub fn basis_len(&self) -> usize {
        2 * self.n_h + 1
    }

    pub fn with_omega(&self, omega: f64) -> Self {
        Self { omega, ..*self }
    }
}

/// Stacked Fourier coefficients of all DOFs on a subharmonic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicVector {
    pub n_dofs: usize,
    pub n_h: usize,
    pub nu: usize,
    pub data: DVector<f64>,
}

/// Amplitude/phase of one harmonic, `x_k(t) = A sin(w_k t - phase)` with the
/// phase mapped into `[0, 2 pi)`. `degenerate` marks a vanishing harmonic
/// whose phase is meaningless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicPolar {
    pub amplitude: f64,
    pub phase: f64,
    pub degenerate: bool,
}

impl HarmonicVector {
    pub fn zeros(n_h: usize, nu: usize, n_dofs: usize) -> Self {
        Self {
            n_dofs,
            n_h,
            nu,
            data: DVector::zeros((2 * n_h + 1) * n_dofs),
        }
    }

    pub fn from_data(n_h: usize, nu: usize, n_dofs: usize, data: DVector<f64>) -> Result<Self> {
        if data.len() != (2 * n_h + 1) * n_dofs {
            return Err(CoreError::DimensionMismatch(format!(
                "coefficient vector has length {}, expected {}",
                data.len(),
                (2 * n_h + 1) * n_dofs
            )));
        }
        Ok(Self {
            n_dofs,
            n_h,
            nu,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn idx_const(&self, dof: usize) -> usize {
        dof
    }

    pub fn idx_sin(&self, j: usize, dof: usize) -> usize {
        (2 * j - 1) * self.n_dofs + dof
    }

    pub fn idx_cos(&self, j: usize, dof: usize) -> usize {
        2 * j * self.n_dofs + dof
    }

    pub fn constant(&self, dof: usize) -> f64 {
        self.data[self.idx_const(dof)]
    }

    pub fn sin_coeff(&self, j: usize, dof: usize) -> f64 {
        self.data[self.idx_sin(j, dof)]
    }

    pub fn cos_coeff(&self, j: usize, dof: usize) -> f64 {
        self.data[self.idx_cos(j, dof)]
    }

    pub fn set_constant(&mut self, dof: usize, value: f64) {
        let idx = self.idx_const(dof);
        self.data[idx] = value;
    }

    pub fn set_sin(&mut self, j: usize, dof: usize, value: f64) {
        let idx = self.idx_sin(j, dof);
        self.data[idx] = value;
    }

    pub fn set_cos(&mut self, j: usize, dof: usize, value: f64) {
        let idx = self.idx_cos(j, dof);
        self.data[idx] = value;
    }

    /// Coefficient column of a single DOF, length `2 n_h + 1`.
    pub fn dof_coeffs(&self, dof: usize) -> DVector<f64> {
        DVector::from_fn(2 * self.n_h + 1, |b, _| self.data[b * self.n_dofs + dof])
    }

    /// Amplitude and phase lag of harmonic `k` at one DOF.
    pub fn amplitude_phase(&self, dof: usize, k: usize) -> HarmonicPolar {
        let s = self.sin_coeff(k, dof);
        let c = self.cos_coeff(k, dof);
        harmonic_polar(s, c)
    }

    /// Applies the time shift `t -> t - delta`, expressed through the phase
    /// `theta = w * delta` at the forcing frequency, rotating grid harmonic
    /// `j` by `j * theta / nu`. The constant term is unchanged.
    pub fn time_shift(&self, theta: f64) -> Self {
        let mut out = self.clone();
        for j in 1..=self.n_h {
            let beta = j as f64 * theta / self.nu as f64;
            let (sin_b, cos_b) = beta.sin_cos();
            for dof in 0..self.n_dofs {
                let s = self.sin_coeff(j, dof);
                let c = self.cos_coeff(j, dof);
                out.data[self.idx_sin(j, dof)] = cos_b * s + sin_b * c;
                out.data[self.idx_cos(j, dof)] = -sin_b * s + cos_b * c;
            }
        }
        out
    }

    pub fn negated(&self) -> Self {
        Self {
            n_dofs: self.n_dofs,
            n_h: self.n_h,
            nu: self.nu,
            data: -&self.data,
        }
    }

    /// Peak of `|x(t)|` per DOF over one grid period, sampled on `n_t`
    /// uniform points.
    pub fn peak_displacements(&self, n_t: usize) -> Vec<f64> {
        let basis = basis_matrix(self.n_h, n_t);
        (0..self.n_dofs)
            .map(|dof| {
                let samples = &basis * self.dof_coeffs(dof);
                samples.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
            })
            .collect()
    }
}

/// Amplitude and `[0, 2 pi)` phase lag from one sine/cosine coefficient pair.
pub fn harmonic_polar(s: f64, c: f64) -> HarmonicPolar {
    let amplitude = s.hypot(c);
    if s == 0.0 && c == 0.0 {
        return HarmonicPolar {
            amplitude: 0.0,
            phase: 0.0,
            degenerate: true,
        };
    }
    let mut phase = (-c).atan2(s);
    if phase < 0.0 {
        phase += TWO_PI;
    }
    HarmonicPolar {
        amplitude,
        phase,
        degenerate: false,
    }
}

/// Wraps an angle difference into `(-pi, pi]`.
pub fn wrap_phase_diff(d: f64) -> f64 {
    let mut w = d.rem_euclid(TWO_PI);
    if w > std::f64::consts::PI {
        w -= TWO_PI;
    }
    w
}

/// Basis sample matrix: row `i` holds `Q(t_i)` on `n_t` uniform samples of the
/// grid period, so entry `(i, 2j-1) = sin(2 pi i j / n_t)` independent of the
/// actual frequency.
pub(crate) fn basis_matrix(n_h: usize, n_t: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_t, 2 * n_h + 1);
    let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
    for i in 0..n_t {
        m[(i, 0)] = inv_sqrt2;
        for j in 1..=n_h {
            let angle = TWO_PI * (i * j) as f64 / n_t as f64;
            let (s, c) = angle.sin_cos();
            m[(i, 2 * j - 1)] = s;
            m[(i, 2 * j)] = c;
        }
    }
    m
}

/// Differential operator of the basis: block-diagonal with a zero for the
/// constant term and `[[0, -w_j], [w_j, 0]]` per harmonic.
pub fn build_grad_operator(grid: &HarmonicGrid) -> DMatrix<f64> {
    let m = grid.basis_len();
    let mut nabla = DMatrix::zeros(m, m);
    for j in 1..=grid.n_h {
        let w = grid.omega_j(j);
        nabla[(2 * j - 1, 2 * j)] = -w;
        nabla[(2 * j, 2 * j - 1)] = w;
    }
    nabla
}

/// Dynamic stiffness `A(w) = nabla^2 x M + nabla x C + I x K` (Kronecker
/// products with the DOF-space matrices).
pub fn build_dynamic_stiffness(model: &SystemModel, grid: &HarmonicGrid) -> DMatrix<f64> {
    let nabla = build_grad_operator(grid);
    let nabla2 = &nabla * &nabla;
    let eye = DMatrix::<f64>::identity(grid.basis_len(), grid.basis_len());
    nabla2.kronecker(model.mass()) + nabla.kronecker(model.damping()) + eye.kronecker(model.stiffness())
}

/// Frequency derivative of the dynamic stiffness. On this grid `nabla` scales
/// linearly with `w`, so `dA/dw = (2/w) nabla^2 x M + (1/w) nabla x C`.
pub fn dynamic_stiffness_domega(model: &SystemModel, grid: &HarmonicGrid) -> DMatrix<f64> {
    let nabla = build_grad_operator(grid);
    let nabla2 = &nabla * &nabla;
    nabla2.kronecker(model.mass()) * (2.0 / grid.omega) + nabla.kronecker(model.damping()) * (1.0 / grid.omega)
}

/// Fourier coefficients of the external forcing `f sin(w t)` at the forced
/// DOF: a single entry at the sine slot of grid harmonic `j = nu`.
pub fn external_forcing(model: &SystemModel, grid: &HarmonicGrid) -> DVector<f64> {
    let n = model.dof_count();
    let mut f_ext = DVector::zeros(grid.basis_len() * n);
    let x = HarmonicVector::zeros(grid.n_h, grid.nu, n);
    f_ext[x.idx_sin(grid.nu, model.forcing_dof())] = model.forcing_amplitude();
    f_ext
}

/// Residual of a nonlinear system together with its analytic Jacobians.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub residual: DVector<f64>,
    pub jacobian_x: DMatrix<f64>,
    /// Derivative with respect to the active continuation parameter (`w`).
    pub jacobian_param: DVector<f64>,
}

/// Forced harmonic balance residual `A(w) X + F_nl(X) - F_ext`.
pub fn hbm_residual_forced(
    model: &SystemModel,
    x: &HarmonicVector,
    grid: &HarmonicGrid,
    aft: &AftEngine,
) -> Result<ResidualReport> {
    check_grid_compat(model, x, grid, aft)?;
    let a = build_dynamic_stiffness(model, grid);
    let (f_nl, df_dx) = aft.nonlinear_terms(model, x)?;
    let residual = &a * &x.data + f_nl - external_forcing(model, grid);
    let jacobian_x = a + df_dx;
    let jacobian_param = dynamic_stiffness_domega(model, grid) * &x.data;
    Ok(ResidualReport {
        residual,
        jacobian_x,
        jacobian_param,
    })
}

fn check_grid_compat(
    model: &SystemModel,
    x: &HarmonicVector,
    grid: &HarmonicGrid,
    aft: &AftEngine,
) -> Result<()> {
    if x.n_dofs != model.dof_count() {
        return Err(CoreError::DimensionMismatch(format!(
            "coefficients have {} DOFs, model has {}",
            x.n_dofs,
            model.dof_count()
        )));
    }
    if x.n_h != grid.n_h || x.nu != grid.nu || aft.n_h() != grid.n_h {
        return Err(CoreError::DimensionMismatch(
            "coefficient vector, grid and AFT engine disagree on the harmonic grid".into(),
        ));
    }
    Ok(())
}

/// Evaluates the truncated series at arbitrary times (displacements, one
/// column per DOF).
pub fn synthesize_time_series(x: &HarmonicVector, omega: f64, times: &[f64]) -> DMatrix<f64> {
    let nu = x.nu as f64;
    let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
    let mut out = DMatrix::zeros(times.len(), x.n_dofs);
    for (row, &t) in times.iter().enumerate() {
        for dof in 0..x.n_dofs {
            let mut v = x.constant(dof) * inv_sqrt2;
            for j in 1..=x.n_h {
                let angle = j as f64 * omega * t / nu;
                let (s, c) = angle.sin_cos();
                v += x.sin_coeff(j, dof) * s + x.cos_coeff(j, dof) * c;
            }
            out[(row, dof)] = v;
        }
    }
    out
}

/// Time derivative of the truncated series at arbitrary times.
pub fn synthesize_velocity_series(x: &HarmonicVector, omega: f64, times: &[f64]) -> DMatrix<f64> {
    let grid = HarmonicGrid {
        n_h: x.n_h,
        nu: x.nu,
        omega,
    };
    let nabla = build_grad_operator(&grid);
    let mut xdot = x.clone();
    for dof in 0..x.n_dofs {
        let col = nabla.clone() * x.dof_coeffs(dof);
        for b in 0..grid.basis_len() {
            xdot.data[b * x.n_dofs + dof] = col[b];
        }
    }
    synthesize_time_series(&xdot, omega, times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aft::AftEngine;
    use crate::model::{build_duffing, build_two_dof};
    use approx::assert_relative_eq;

    #[test]
    fn grid_validation() {
        assert!(HarmonicGrid::new(8, 1, 1.0).is_ok());
        assert!(HarmonicGrid::new(2, 3, 1.0).is_err());
        assert!(HarmonicGrid::new(8, 0, 1.0).is_err());
        assert!(HarmonicGrid::new(8, 1, 0.0).is_err());
    }

    #[test]
    fn grad_operator_differentiates_sine() {
        let grid = HarmonicGrid::new(3, 1, 2.0).unwrap();
        let nabla = build_grad_operator(&grid);
        let mut x = HarmonicVector::zeros(3, 1, 1);
        x.set_sin(1, 0, 1.0);
        let v = nabla * &x.data;
        // d/dt sin(2t) = 2 cos(2t)
        assert_relative_eq!(v[x.idx_cos(1, 0)], 2.0, epsilon = 1e-15);
        assert_eq!(v.iter().filter(|&&e| e != 0.0).count(), 1);
    }

    #[test]
    fn grad_operator_kills_constant() {
        let grid = HarmonicGrid::new(4, 2, 1.3).unwrap();
        let nabla = build_grad_operator(&grid);
        let mut coeffs = DVector::zeros(grid.basis_len());
        coeffs[0] = 5.0;
        assert_eq!((nabla * coeffs).norm(), 0.0);
    }

    #[test]
    fn grad_operator_subharmonic_frequencies() {
        let grid = HarmonicGrid::new(4, 3, 3.0).unwrap();
        let nabla = build_grad_operator(&grid);
        // harmonic j = 2 has frequency 2 * 3 / 3 = 2
        assert_relative_eq!(nabla[(3, 4)], -2.0);
        assert_relative_eq!(nabla[(4, 3)], 2.0);
    }

    #[test]
    fn grad_operator_antisymmetric() {
        let grid = HarmonicGrid::new(6, 2, 0.7).unwrap();
        let nabla = build_grad_operator(&grid);
        assert_relative_eq!((&nabla + nabla.transpose()).norm(), 0.0);
    }

    #[test]
    fn dynamic_stiffness_duffing_blocks() {
        let model = build_duffing(1.0, 0.01, 1.0, 1.0, 0.01).unwrap();
        let grid = HarmonicGrid::new(1, 1, 1.0).unwrap();
        let a = build_dynamic_stiffness(&model, &grid);
        // constant block = K
        assert_relative_eq!(a[(0, 0)], 1.0);
        // harmonic-1 block at w = w0: [[0, -c w], [c w, 0]]
        assert_relative_eq!(a[(1, 1)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(a[(1, 2)], -0.01);
        assert_relative_eq!(a[(2, 1)], 0.01);

        let grid = HarmonicGrid::new(1, 1, 0.5).unwrap();
        let a = build_dynamic_stiffness(&model, &grid);
        assert_relative_eq!(a[(1, 1)], 0.75);
        assert_relative_eq!(a[(2, 2)], 0.75);
    }

    #[test]
    fn dynamic_stiffness_domega_matches_differences() {
        let model = build_two_dof(0.5).unwrap();
        let grid = HarmonicGrid::new(5, 2, 0.9).unwrap();
        let h = 1e-6;
        let plus = build_dynamic_stiffness(&model, &grid.with_omega(0.9 + h));
        let minus = build_dynamic_stiffness(&model, &grid.with_omega(0.9 - h));
        let fd = (plus - minus) / (2.0 * h);
        let analytic = dynamic_stiffness_domega(&model, &grid);
        assert_relative_eq!((fd - analytic).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn polar_conventions() {
        let p = harmonic_polar(0.0, -1.0);
        assert_relative_eq!(p.amplitude, 1.0);
        assert_relative_eq!(p.phase, std::f64::consts::FRAC_PI_2);

        let p = harmonic_polar(1.0, 0.0);
        assert_relative_eq!(p.phase, 0.0);

        let p = harmonic_polar(0.0, 1.0);
        assert_relative_eq!(p.phase, 3.0 * std::f64::consts::FRAC_PI_2);

        let p = harmonic_polar(0.0, 0.0);
        assert!(p.degenerate);
        assert_eq!(p.phase, 0.0);
    }

    #[test]
    fn synthesis_conventions() {
        let mut x = HarmonicVector::zeros(3, 1, 1);
        let omega = 1.7;
        assert_eq!(synthesize_time_series(&x, omega, &[0.3])[(0, 0)], 0.0);

        x.set_constant(0, 2.0f64.sqrt());
        let out = synthesize_time_series(&x, omega, &[0.0, 0.4, 1.1]);
        for i in 0..3 {
            assert_relative_eq!(out[(i, 0)], 1.0, epsilon = 1e-15);
        }

        let mut x = HarmonicVector::zeros(3, 1, 1);
        x.set_sin(1, 0, 1.0);
        let quarter = std::f64::consts::PI / (2.0 * omega);
        let out = synthesize_time_series(&x, omega, &[quarter]);
        assert_relative_eq!(out[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_at_origin_is_minus_forcing() {
        let model = build_duffing(1.0, 0.01, 1.0, 1.0, 0.01).unwrap();
        let grid = HarmonicGrid::new(8, 1, 0.8).unwrap();
        let aft = AftEngine::with_default_samples(&model, &grid).unwrap();
        let x = HarmonicVector::zeros(8, 1, 1);
        let rep = hbm_residual_forced(&model, &x, &grid, &aft).unwrap();
        assert_relative_eq!(rep.residual.norm(), 0.01, epsilon = 1e-15);
    }

    #[test]
    fn time_shift_moves_phase() {
        let mut x = HarmonicVector::zeros(4, 1, 1);
        x.set_sin(1, 0, 1.0);
        // shifting sin(t) by a quarter period turns it into cos-like content
        let shifted = x.time_shift(std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(shifted.sin_coeff(1, 0), 0.0, epsilon = 1e-15);
        assert_relative_eq!(shifted.cos_coeff(1, 0), -1.0, epsilon = 1e-15);
        // sin(t - pi/2) = -cos(t)
        let omega = 1.0;
        let t = 0.3;
        let direct = synthesize_time_series(&x, omega, &[t - std::f64::consts::FRAC_PI_2]);
        let via_shift = synthesize_time_series(&shifted, omega, &[t]);
        assert_relative_eq!(direct[(0, 0)], via_shift[(0, 0)], epsilon = 1e-12);
    }
}
