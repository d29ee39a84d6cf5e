//! Alternating frequency/time evaluation of polynomial nonlinear forces.
//!
//! Coefficients are synthesized on a uniform sample grid over one grid
//! period, the nonlinearity is applied pointwise, and the samples are
//! projected back onto the basis by a discrete Fourier transform. Because the
//! sample phases `2 pi i j / N_t` do not involve the excitation frequency,
//! the resulting Fourier coefficients (and their Jacobian) are independent of
//! `w`, which keeps the continuation Jacobians exact.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::hbm::{basis_matrix, HarmonicGrid, HarmonicVector};
use crate::model::SystemModel;

/// Default number of time samples per grid period.
pub const DEFAULT_TIME_SAMPLES: usize = 1024;

/// Precomputed synthesis/projection matrices for one harmonic grid shape.
#[derive(Debug, Clone)]
pub struct AftEngine {
    n_h: usize,
    nu: usize,
    n_t: usize,
    synth: DMatrix<f64>,
    proj: DMatrix<f64>,
}

impl AftEngine {
    pub fn new(n_h: usize, nu: usize, n_t: usize) -> Result<Self> {
        if n_t <= 2 * n_h {
            return Err(CoreError::Aliasing(format!(
                "{n_t} samples cannot resolve {n_h} harmonics"
            )));
        }
        let synth = basis_matrix(n_h, n_t);
        let proj = synth.transpose() * (2.0 / n_t as f64);
        Ok(Self {
            n_h,
            nu,
            n_t,
            synth,
            proj,
        })
    }

    /// Picks the sample count automatically: the 1024 default, raised to the
    /// next power of two whenever the alias-free bound for the model's
    /// polynomial degree requires it.
    pub fn with_default_samples(model: &SystemModel, grid: &HarmonicGrid) -> Result<Self> {
        let bound = alias_bound(model, grid.n_h);
        let n_t = DEFAULT_TIME_SAMPLES.max(bound.next_power_of_two());
        Self::new(grid.n_h, grid.nu, n_t)
    }

    pub fn n_h(&self) -> usize {
        self.n_h
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn samples(&self) -> usize {
        self.n_t
    }

    /// Synthesizes displacement samples over one grid period, one column per
    /// DOF.
    pub fn synthesize(&self, x: &HarmonicVector) -> DMatrix<f64> {
        let mut coeffs = DMatrix::zeros(2 * self.n_h + 1, x.n_dofs);
        for dof in 0..x.n_dofs {
            coeffs.set_column(dof, &x.dof_coeffs(dof));
        }
        &self.synth * coeffs
    }

    /// Projects time samples (one column per DOF) back onto the basis,
    /// returning stacked basis-major coefficients.
    pub fn project(&self, samples: &DMatrix<f64>) -> DVector<f64> {
        let coeffs = &self.proj * samples;
        let n = samples.ncols();
        DVector::from_fn(coeffs.nrows() * n, |i, _| coeffs[(i / n, i % n)])
    }

    /// Fourier coefficients of the nonlinear forces and their Jacobian with
    /// respect to the displacement coefficients.
    pub fn nonlinear_terms(
        &self,
        model: &SystemModel,
        x: &HarmonicVector,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if x.n_h != self.n_h || x.n_dofs != model.dof_count() {
            return Err(CoreError::DimensionMismatch(
                "coefficient vector does not match the AFT engine shape".into(),
            ));
        }
        let bound = alias_bound(model, self.n_h);
        if self.n_t < bound {
            return Err(CoreError::Aliasing(format!(
                "{} samples alias polynomial degree {} at {} harmonics (need >= {bound})",
                self.n_t,
                model.max_exponent(),
                self.n_h
            )));
        }

        let n = model.dof_count();
        let len = (2 * self.n_h + 1) * n;
        if model.nonlinear_terms().is_empty() {
            return Ok((DVector::zeros(len), DMatrix::zeros(len, len)));
        }

        let samples = self.synthesize(x);
        let mut force_samples = DMatrix::zeros(self.n_t, n);
        let mut jacobian = DMatrix::zeros(len, len);
        for term in model.nonlinear_terms() {
            let exp = term.exponent as i32;
            let mut weighted = self.synth.clone();
            for i in 0..self.n_t {
                let xs = samples[(i, term.source)];
                force_samples[(i, term.target)] += term.coefficient * xs.powi(exp);
                let w = term.coefficient * exp as f64 * xs.powi(exp - 1);
                for b in 0..2 * self.n_h + 1 {
                    weighted[(i, b)] = self.synth[(i, b)] * w;
                }
            }
            let block = &self.proj * weighted;
            for bi in 0..2 * self.n_h + 1 {
                for bj in 0..2 * self.n_h + 1 {
                    jacobian[(bi * n + term.target, bj * n + term.source)] += block[(bi, bj)];
                }
            }
        }
        Ok((self.project(&force_samples), jacobian))
    }
}

fn alias_bound(model: &SystemModel, n_h: usize) -> usize {
    2 * model.max_exponent() as usize * n_h + 1
}

/// One-shot AFT evaluation with an explicit sample count.
pub fn aft_nonlinear_terms(
    model: &SystemModel,
    x: &HarmonicVector,
    n_t: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let engine = AftEngine::new(x.n_h, x.nu, n_t)?;
    engine.nonlinear_terms(model, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_duffing, build_two_dof};
    use approx::assert_relative_eq;

    fn duffing() -> SystemModel {
        build_duffing(1.0, 0.01, 1.0, 1.0, 0.01).unwrap()
    }

    #[test]
    fn linear_model_yields_zero() {
        let model = build_duffing(1.0, 0.01, 1.0, 0.0, 0.01).unwrap();
        let mut x = HarmonicVector::zeros(8, 1, 1);
        x.set_sin(1, 0, 0.7);
        let (f, df) = aft_nonlinear_terms(&model, &x, 1024).unwrap();
        assert_eq!(f.norm(), 0.0);
        assert_eq!(df.norm(), 0.0);
    }

    #[test]
    fn cubic_of_pure_sine_matches_identity() {
        // sin^3 t = (3 sin t - sin 3t) / 4
        let model = duffing();
        let a = 0.9;
        let mut x = HarmonicVector::zeros(8, 1, 1);
        x.set_sin(1, 0, a);
        let (f, _) = aft_nonlinear_terms(&model, &x, 1024).unwrap();
        assert_relative_eq!(f[x.idx_sin(1, 0)], 0.75 * a * a * a, epsilon = 1e-12);
        assert_relative_eq!(f[x.idx_sin(3, 0)], -0.25 * a * a * a, epsilon = 1e-12);
        assert_relative_eq!(f[x.idx_cos(1, 0)], 0.0, epsilon = 1e-13);
        assert_relative_eq!(f[x.idx_const(0)], 0.0, epsilon = 1e-13);
    }

    /// Independent route: project f_nl(x(t)) onto every basis function with
    /// high-resolution trapezoid quadrature over the grid period.
    fn quadrature_projection(
        model: &SystemModel,
        x: &HarmonicVector,
        omega: f64,
        samples: usize,
    ) -> DVector<f64> {
        use crate::hbm::synthesize_time_series;
        let nu = x.nu as f64;
        let period = nu * crate::hbm::TWO_PI / omega;
        let times: Vec<f64> = (0..samples).map(|i| i as f64 * period / samples as f64).collect();
        let disp = synthesize_time_series(x, omega, &times);
        let n = x.n_dofs;
        let mut out = DVector::zeros((2 * x.n_h + 1) * n);
        let zero_v = DVector::zeros(n);
        for (i, &t) in times.iter().enumerate() {
            let xi = DVector::from_fn(n, |d, _| disp[(i, d)]);
            let f = model.nonlinear_force(&xi, &zero_v).unwrap();
            for dof in 0..n {
                out[dof] += f[dof] / 2.0f64.sqrt();
                for j in 1..=x.n_h {
                    let angle = j as f64 * omega * t / nu;
                    out[x.idx_sin(j, dof)] += f[dof] * angle.sin();
                    out[x.idx_cos(j, dof)] += f[dof] * angle.cos();
                }
            }
        }
        out * (2.0 / samples as f64)
    }

    #[test]
    fn aft_matches_quadrature_oracle() {
        let model = duffing();
        let mut x = HarmonicVector::zeros(8, 1, 1);
        x.set_sin(1, 0, 1.0);
        x.set_cos(2, 0, 0.2);
        x.set_constant(0, 0.1);
        let (f, _) = aft_nonlinear_terms(&model, &x, 1024).unwrap();
        let oracle = quadrature_projection(&model, &x, 1.3, 10_000);
        assert_relative_eq!((f - oracle).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn aft_matches_quadrature_oracle_two_dof() {
        let model = build_two_dof(0.5).unwrap();
        let mut x = HarmonicVector::zeros(6, 3, 2);
        x.set_sin(1, 0, 0.4);
        x.set_sin(3, 0, -0.3);
        x.set_cos(2, 1, 0.25);
        x.set_constant(0, -0.05);
        let (f, _) = aft_nonlinear_terms(&model, &x, 1024).unwrap();
        let oracle = quadrature_projection(&model, &x, 0.8, 10_000);
        assert_relative_eq!((f - oracle).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = build_two_dof(0.5).unwrap();
        let mut x = HarmonicVector::zeros(5, 2, 2);
        for i in 0..x.len() {
            x.data[i] = 0.4 * (1.7 * i as f64).sin() - 0.1 * (0.3 * i as f64).cos();
        }
        let engine = AftEngine::new(5, 2, 256).unwrap();
        let (_, jac) = engine.nonlinear_terms(&model, &x).unwrap();
        let h = 1e-6;
        for col in 0..x.len() {
            let mut plus = x.clone();
            plus.data[col] += h;
            let mut minus = x.clone();
            minus.data[col] -= h;
            let (fp, _) = engine.nonlinear_terms(&model, &plus).unwrap();
            let (fm, _) = engine.nonlinear_terms(&model, &minus).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            for row in 0..x.len() {
                assert_relative_eq!(jac[(row, col)], fd[row], epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn alias_bound_enforced() {
        let model = duffing();
        let x = HarmonicVector::zeros(8, 1, 1);
        // cubic at 8 harmonics needs at least 49 samples
        assert!(aft_nonlinear_terms(&model, &x, 48).is_err());
        assert!(aft_nonlinear_terms(&model, &x, 49).is_ok());
    }

    #[test]
    fn default_samples_raise_for_many_harmonics() {
        let model = duffing();
        let grid = HarmonicGrid::new(200, 1, 1.0).unwrap();
        let engine = AftEngine::with_default_samples(&model, &grid).unwrap();
        assert!(engine.samples() >= 2 * 3 * 200 + 1);
        assert!(engine.samples().is_power_of_two());
    }

    #[test]
    fn round_trip_synthesize_project() {
        let mut x = HarmonicVector::zeros(8, 3, 2);
        for i in 0..x.len() {
            x.data[i] = (i as f64 * 0.37).sin();
        }
        let engine = AftEngine::new(8, 3, 64).unwrap();
        let back = engine.project(&engine.synthesize(&x));
        assert_relative_eq!((back - x.data).norm(), 0.0, epsilon = 1e-12);
    }
}
