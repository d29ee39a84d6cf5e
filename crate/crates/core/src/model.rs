//! Mechanical system definitions: mass/damping/stiffness matrices, polynomial
//! nonlinear forces and the forcing vector, plus the two built-in benchmark
//! systems (a Duffing oscillator and a two-mass chain with a cubic spring on
//! the first mass).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// A monomial restoring force `coefficient * x[source]^exponent` added to the
/// equation of the `target` DOF. Linear terms belong in the stiffness matrix,
/// so the exponent must be at least 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolynomialTerm {
    pub target: usize,
    pub source: usize,
    pub exponent: u32,
    pub coefficient: f64,
}

/// A forced mechanical system `M x'' + C x' + K x + f_nl(x) = f e_l sin(w t)`.
///
/// Immutable after construction; shared freely across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    n: usize,
    mass: DMatrix<f64>,
    damping: DMatrix<f64>,
    stiffness: DMatrix<f64>,
    nonlinear_terms: Vec<PolynomialTerm>,
    forcing_dof: usize,
    forcing_amplitude: f64,
}

/// On-disk JSON representation of a [`SystemModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    n: usize,
    #[serde(rename = "M")]
    mass: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    damping: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    stiffness: Vec<Vec<f64>>,
    #[serde(default)]
    nonlinear: Vec<PolynomialTerm>,
    forcing_dof: usize,
    forcing_amplitude: f64,
}

impl SystemModel {
    pub fn new(
        mass: DMatrix<f64>,
        damping: DMatrix<f64>,
        stiffness: DMatrix<f64>,
        nonlinear_terms: Vec<PolynomialTerm>,
        forcing_dof: usize,
        forcing_amplitude: f64,
    ) -> Result<Self> {
        let n = mass.nrows();
        for (name, m) in [("M", &mass), ("C", &damping), ("K", &stiffness)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(CoreError::InvalidModel(format!(
                    "{name} must be {n}x{n}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if n == 0 {
            return Err(CoreError::InvalidModel("empty system".into()));
        }
        if mass.clone().lu().try_inverse().is_none() {
            return Err(CoreError::InvalidModel("mass matrix is singular".into()));
        }
        if forcing_dof >= n {
            return Err(CoreError::InvalidModel(format!(
                "forcing_dof {forcing_dof} out of range for {n} DOFs"
            )));
        }
        if !(forcing_amplitude >= 0.0) {
            return Err(CoreError::InvalidModel(
                "forcing amplitude must be non-negative".into(),
            ));
        }
        for term in &nonlinear_terms {
            if term.target >= n || term.source >= n {
                return Err(CoreError::InvalidModel(format!(
                    "nonlinear term indexes DOF {}/{} but system has {n} DOFs",
                    term.target, term.source
                )));
            }
            if term.exponent < 2 {
                return Err(CoreError::InvalidModel(
                    "nonlinear exponents must be >= 2 (linear terms belong in K)".into(),
                ));
            }
        }
        Ok(Self {
            n,
            mass,
            damping,
            stiffness,
            nonlinear_terms,
            forcing_dof,
            forcing_amplitude,
        })
    }

    pub fn dof_count(&self) -> usize {
        self.n
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }

    pub fn damping(&self) -> &DMatrix<f64> {
        &self.damping
    }

    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.stiffness
    }

    pub fn nonlinear_terms(&self) -> &[PolynomialTerm] {
        &self.nonlinear_terms
    }

    pub fn forcing_dof(&self) -> usize {
        self.forcing_dof
    }

    pub fn forcing_amplitude(&self) -> f64 {
        self.forcing_amplitude
    }

    /// Returns a copy with a different forcing amplitude.
    pub fn with_forcing_amplitude(&self, f: f64) -> Result<Self> {
        if !(f >= 0.0) {
            return Err(CoreError::InvalidModel(
                "forcing amplitude must be non-negative".into(),
            ));
        }
        let mut out = self.clone();
        out.forcing_amplitude = f;
        Ok(out)
    }

    /// Largest nonlinear exponent, 1 for a linear system.
    pub fn max_exponent(&self) -> u32 {
        self.nonlinear_terms
            .iter()
            .map(|t| t.exponent)
            .max()
            .unwrap_or(1)
    }

    /// Evaluates the nonlinear restoring force at one time instant.
    ///
    /// The velocity argument is reserved for future velocity-dependent terms;
    /// the shipped benchmarks are purely displacement-dependent.
    pub fn nonlinear_force(&self, x: &DVector<f64>, _v: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n {
            return Err(CoreError::DimensionMismatch(format!(
                "displacement has length {}, expected {}",
                x.len(),
                self.n
            )));
        }
        let mut f = DVector::zeros(self.n);
        for term in &self.nonlinear_terms {
            f[term.target] += term.coefficient * x[term.source].powi(term.exponent as i32);
        }
        Ok(f)
    }

    /// Serializes to the JSON model format.
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            n: self.n,
            mass: matrix_rows(&self.mass),
            damping: matrix_rows(&self.damping),
            stiffness: matrix_rows(&self.stiffness),
            nonlinear: self.nonlinear_terms.clone(),
            forcing_dof: self.forcing_dof,
            forcing_amplitude: self.forcing_amplitude,
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }

    /// Parses the JSON model format.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)
            .map_err(|e| CoreError::InvalidModel(format!("JSON parse error: {e}")))?;
        let n = file.n;
        let to_matrix = |rows: &[Vec<f64>], name: &str| -> Result<DMatrix<f64>> {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(CoreError::InvalidModel(format!("{name} must be {n}x{n}")));
            }
            Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
        };
        Self::new(
            to_matrix(&file.mass, "M")?,
            to_matrix(&file.damping, "C")?,
            to_matrix(&file.stiffness, "K")?,
            file.nonlinear,
            file.forcing_dof,
            file.forcing_amplitude,
        )
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Single-mass oscillator `m x'' + c x' + k x + k_nl x^3 = f sin(w t)`.
pub fn build_duffing(m: f64, c: f64, k: f64, k_nl: f64, f: f64) -> Result<SystemModel> {
    if !(m > 0.0) || !(k > 0.0) {
        return Err(CoreError::InvalidModel(
            "mass and linear stiffness must be positive".into(),
        ));
    }
    let terms = if k_nl != 0.0 {
        vec![PolynomialTerm {
            target: 0,
            source: 0,
            exponent: 3,
            coefficient: k_nl,
        }]
    } else {
        Vec::new()
    };
    SystemModel::new(
        DMatrix::from_element(1, 1, m),
        DMatrix::from_element(1, 1, c),
        DMatrix::from_element(1, 1, k),
        terms,
        0,
        f,
    )
}

/// Two-mass chain with a cubic spring on the first mass, forced at the first
/// mass. Its linearized natural frequencies are 1 and sqrt(3) rad/s.
pub fn build_two_dof(f: f64) -> Result<SystemModel> {
    SystemModel::new(
        DMatrix::identity(2, 2),
        DMatrix::from_row_slice(2, 2, &[0.02, -0.01, -0.01, 0.11]),
        DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]),
        vec![PolynomialTerm {
            target: 0,
            source: 0,
            exponent: 3,
            coefficient: 1.0,
        }],
        0,
        f,
    )
}

/// Builds one of the named built-in models. Recognized names are `duffing`
/// (parameters m=1, c=0.01, k=1, k_nl=1) and `two_dof`.
pub fn build_named(name: &str, f: f64) -> Result<SystemModel> {
    match name {
        "duffing" => build_duffing(1.0, 0.01, 1.0, 1.0, f),
        "two_dof" => build_two_dof(f),
        other => Err(CoreError::InvalidModel(format!(
            "unknown built-in model '{other}' (expected 'duffing' or 'two_dof')"
        ))),
    }
}

/// Undamped natural frequencies: square roots of the generalized eigenvalues
/// of (K, M), ascending. Requires symmetric K and positive-definite M.
pub fn linear_natural_frequencies(model: &SystemModel) -> Result<Vec<f64>> {
    let chol = nalgebra::Cholesky::new(model.mass.clone())
        .ok_or_else(|| CoreError::EigenFailure("mass matrix is not positive definite".into()))?;
    // Transform K x = w^2 M x into the standard symmetric problem
    // (L^-1 K L^-T) y = w^2 y with M = L L^T.
    let l = chol.l();
    let mut b = model.stiffness.clone();
    l.solve_lower_triangular_mut(&mut b);
    let mut bt = b.transpose();
    l.solve_lower_triangular_mut(&mut bt);
    let sym = (bt.transpose() + bt) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut freqs: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    freqs.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    Ok(freqs)
}

/// Mode shapes paired with the frequencies of [`linear_natural_frequencies`].
/// Shapes are mass-normalized columns, sign fixed so the largest entry is
/// positive.
pub fn linear_modes(model: &SystemModel) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let chol = nalgebra::Cholesky::new(model.mass.clone())
        .ok_or_else(|| CoreError::EigenFailure("mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let mut b = model.stiffness.clone();
    l.solve_lower_triangular_mut(&mut b);
    let mut bt = b.transpose();
    l.solve_lower_triangular_mut(&mut bt);
    let sym = (bt.transpose() + bt) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..model.n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("finite eigenvalues")
    });
    let mut freqs = Vec::with_capacity(model.n);
    let mut shapes = DMatrix::zeros(model.n, model.n);
    for (col, &idx) in order.iter().enumerate() {
        freqs.push(eig.eigenvalues[idx].max(0.0).sqrt());
        // Back-transform y -> x = L^-T y.
        let mut shape = eig.eigenvectors.column(idx).clone_owned();
        l.transpose().solve_upper_triangular_mut(&mut shape);
        let lead = shape.iter().cloned().fold(0.0f64, |acc, v| {
            if v.abs() > acc.abs() {
                v
            } else {
                acc
            }
        });
        if lead < 0.0 {
            shape.neg_mut();
        }
        shapes.set_column(col, &shape);
    }
    Ok((freqs, shapes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn duffing_reference_parameters() {
        let model = build_duffing(1.0, 0.01, 1.0, 1.0, 0.01).unwrap();
        let freqs = linear_natural_frequencies(&model).unwrap();
        assert_relative_eq!(freqs[0], 1.0, max_relative = 1e-12);
        assert_eq!(model.nonlinear_terms().len(), 1);
    }

    #[test]
    fn duffing_zero_cubic_is_linear() {
        let model = build_duffing(1.0, 0.01, 1.0, 0.0, 0.01).unwrap();
        assert!(model.nonlinear_terms().is_empty());
        assert_eq!(model.max_exponent(), 1);
    }

    #[test]
    fn duffing_natural_frequency_scales_with_stiffness() {
        let model = build_duffing(1.0, 0.01, 4.0, 1.0, 0.01).unwrap();
        let freqs = linear_natural_frequencies(&model).unwrap();
        assert_relative_eq!(freqs[0], 2.0, max_relative = 1e-12);

        let heavy = build_duffing(4.0, 0.01, 1.0, 1.0, 0.01).unwrap();
        let freqs = linear_natural_frequencies(&heavy).unwrap();
        assert_relative_eq!(freqs[0], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn invalid_duffing_parameters_rejected() {
        assert!(build_duffing(0.0, 0.01, 1.0, 1.0, 0.01).is_err());
        assert!(build_duffing(1.0, 0.01, -1.0, 1.0, 0.01).is_err());
        assert!(build_duffing(1.0, 0.01, 1.0, 1.0, -0.5).is_err());
    }

    #[test]
    fn two_dof_matches_stated_structure() {
        let model = build_two_dof(0.161).unwrap();
        assert_eq!(model.dof_count(), 2);
        assert_eq!(model.forcing_dof(), 0);
        let freqs = linear_natural_frequencies(&model).unwrap();
        assert_relative_eq!(freqs[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(freqs[1], 3.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn two_dof_zero_forcing_is_valid() {
        let model = build_two_dof(0.0).unwrap();
        assert_eq!(model.forcing_amplitude(), 0.0);
    }

    #[test]
    fn nonlinear_force_cubic_values() {
        let duffing = build_duffing(1.0, 0.01, 1.0, 1.0, 0.01).unwrap();
        let f = duffing
            .nonlinear_force(&DVector::from_vec(vec![2.0]), &DVector::zeros(1))
            .unwrap();
        assert_eq!(f[0], 8.0);
        let f = duffing
            .nonlinear_force(&DVector::zeros(1), &DVector::zeros(1))
            .unwrap();
        assert_eq!(f[0], 0.0);

        let two = build_two_dof(1.5).unwrap();
        let f = two
            .nonlinear_force(&DVector::from_vec(vec![-1.0, 5.0]), &DVector::zeros(2))
            .unwrap();
        assert_eq!(f[0], -1.0);
        assert_eq!(f[1], 0.0);
    }

    #[test]
    fn nonlinear_force_rejects_bad_dimension() {
        let duffing = build_duffing(1.0, 0.01, 1.0, 1.0, 0.01).unwrap();
        assert!(duffing
            .nonlinear_force(&DVector::zeros(2), &DVector::zeros(2))
            .is_err());
    }

    #[test]
    fn json_round_trip() {
        let model = build_two_dof(1.5).unwrap();
        let text = model.to_json();
        let back = SystemModel::from_json(&text).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn json_rejects_inconsistent_dimensions() {
        let text = r#"{"n":2,"M":[[1.0]],"C":[[0.0]],"K":[[1.0]],"forcing_dof":0,"forcing_amplitude":0.0}"#;
        assert!(SystemModel::from_json(text).is_err());
    }

    #[test]
    fn named_builders() {
        assert!(build_named("duffing", 0.01).is_ok());
        assert!(build_named("two_dof", 0.161).is_ok());
        assert!(build_named("pendulum", 1.0).is_err());
    }
}
