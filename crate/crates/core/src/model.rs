//! Model data `(Σ, μ, R, u)`, matrix-class and stability checks, and the
//! closed-form quantities that follow directly from the data.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lp::strict_feasibility_margin;
use crate::scalar::{dot, max_abs, Scalar};

/// Default absolute tolerance on max-abs matrix residuals.
pub const DEFAULT_MATRIX_TOL: f64 = 1e-9;
/// Smallest admissible eigenvalue of Σ.
pub const SPD_EIGEN_FLOOR: f64 = 1e-10;
/// Symmetry tolerance for Σ.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Principal-submatrix enumeration bound for the completely-S test.
pub const MAX_COMPLETELY_S_DIM: usize = 16;
/// Required strict-feasibility margin per principal submatrix.
pub const COMPLETELY_S_MARGIN: f64 = 1e-9;
/// Linear systems above this 1-norm condition estimate are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Problem data of a sticky Brownian motion on the orthant.
///
/// `sigma` is the covariance of the driving Brownian motion per unit time,
/// `mu` its drift, `refl` the reflection matrix whose i-th column is the push
/// direction on face `{x_i = 0}`, and `stickiness` the time spent per unit of
/// local time on each face.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec<T> {
    pub d: usize,
    pub sigma: Matrix<T>,
    pub mu: Vec<T>,
    pub refl: Matrix<T>,
    pub stickiness: Vec<T>,
}

impl<T: Scalar> ModelSpec<T> {
    /// Checks dimensional consistency and stickiness entries. Matrix-class
    /// conditions are left to [`validate_model`].
    pub fn new(sigma: Matrix<T>, mu: Vec<T>, refl: Matrix<T>, stickiness: Vec<T>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if sigma.rows() != d || sigma.cols() != d {
            return Err(Error::Config(format!(
                "sigma is {}x{}, expected {d}x{d}",
                sigma.rows(),
                sigma.cols()
            )));
        }
        if refl.rows() != d || refl.cols() != d {
            return Err(Error::Config(format!(
                "R is {}x{}, expected {d}x{d}",
                refl.rows(),
                refl.cols()
            )));
        }
        if stickiness.len() != d {
            return Err(Error::Config(format!(
                "u has {} entries, expected {d}",
                stickiness.len()
            )));
        }
        if let Some(i) = stickiness
            .iter()
            .position(|&u| !(u.is_finite() && u >= T::zero()))
        {
            return Err(Error::Config(format!(
                "u[{i}] = {} must be finite and non-negative",
                stickiness[i]
            )));
        }
        if sigma.max_abs().is_nan() || refl.max_abs().is_nan() || mu.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Config(
                "model data contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            d,
            sigma,
            mu,
            refl,
            stickiness,
        })
    }

    pub fn from_f64(
        sigma: &[Vec<f64>],
        mu: &[f64],
        refl: &[Vec<f64>],
        stickiness: &[f64],
    ) -> Result<Self> {
        Self::new(
            Matrix::from_f64_rows(sigma)?,
            mu.iter().map(|&x| T::lit(x)).collect(),
            Matrix::from_f64_rows(refl)?,
            stickiness.iter().map(|&x| T::lit(x)).collect(),
        )
    }

    pub fn with_stickiness(&self, stickiness: Vec<T>) -> Result<Self> {
        Self::new(
            self.sigma.clone(),
            self.mu.clone(),
            self.refl.clone(),
            stickiness,
        )
    }

    /// The same model with every stickiness set to zero (the plain SRBM).
    pub fn srbm(&self) -> Self {
        Self {
            stickiness: vec![T::zero(); self.d],
            ..self.clone()
        }
    }

    pub fn is_srbm(&self) -> bool {
        self.stickiness.iter().all(|&u| u == T::zero())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub spd_ok: bool,
    pub completely_s_ok: bool,
    pub m_matrix: bool,
    pub stable: bool,
    pub skew_symmetric: bool,
    pub messages: Vec<String>,
}

impl ValidationReport {
    /// Simulation needs a positive definite Σ and a completely-S R.
    pub fn simulable(&self) -> bool {
        self.spd_ok && self.completely_s_ok
    }
}

pub fn validate_model<T: Scalar>(spec: &ModelSpec<T>) -> ValidationReport {
    let mut messages = Vec::new();

    let symmetric = spec.sigma.is_symmetric(T::lit(SYMMETRY_TOL));
    if !symmetric {
        messages.push(format!(
            "sigma is not symmetric (max asymmetry {:.3e})",
            spec.sigma
                .max_abs_diff(&spec.sigma.transpose())
                .to_f64_lossy()
        ));
    }
    let min_eig = spec.sigma.symmetric_eigenvalues()[0];
    let spd_ok = symmetric && min_eig > T::lit(SPD_EIGEN_FLOOR);
    if symmetric && !spd_ok {
        messages.push(format!(
            "sigma is not positive definite (smallest eigenvalue {:.3e})",
            min_eig.to_f64_lossy()
        ));
    }

    let completely_s_ok = match is_completely_s(&spec.refl) {
        Ok(v) => {
            if !v {
                messages.push("R is not completely-S".into());
            }
            v
        }
        Err(e) => {
            messages.push(format!("completely-S test skipped: {e}"));
            false
        }
    };

    let m_matrix = is_m_matrix(&spec.refl, T::lit(DEFAULT_MATRIX_TOL));

    let stable = match spec.refl.lu() {
        Ok(lu) if lu.condition() < T::lit(SINGULAR_CONDITION) => {
            let drift = lu.solve(&spec.mu).expect("dimensions checked");
            let ok = drift.iter().all(|&v| v < T::zero());
            if !ok {
                messages.push(format!(
                    "unstable: R^-1 mu = {:?} is not componentwise negative",
                    drift.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()
                ));
            }
            ok
        }
        _ => {
            messages.push("unstable: R is singular".into());
            false
        }
    };

    let skew_symmetric = match check_skew_symmetry(spec) {
        Ok(s) => s.holds,
        Err(e) => {
            messages.push(format!("skew-symmetry test skipped: {e}"));
            false
        }
    };

    ValidationReport {
        spd_ok,
        completely_s_ok,
        m_matrix,
        stable,
        skew_symmetric,
        messages,
    }
}

/// Every principal submatrix `R̃` admits `x ≥ 0` with `R̃x > 0`.
///
/// Each of the `2^d − 1` principal submatrices is decided by a small LP that
/// maximizes a margin `t` with `R̃x ≥ t·1`, `x ≥ 0`, `Σx ≤ 1`.
pub fn is_completely_s<T: Scalar>(r: &Matrix<T>) -> Result<bool> {
    if !r.is_square() {
        return Err(Error::Config(format!(
            "reflection matrix is {}x{}, expected square",
            r.rows(),
            r.cols()
        )));
    }
    let d = r.rows();
    if d > MAX_COMPLETELY_S_DIM {
        return Err(Error::UnsupportedDimension {
            dim: d,
            max: MAX_COMPLETELY_S_DIM,
        });
    }
    let margin = T::lit(COMPLETELY_S_MARGIN);
    for mask in 1u32..(1u32 << d) {
        let idx: Vec<usize> = (0..d).filter(|&i| mask & (1 << i) != 0).collect();
        let sub = r.select(&idx, &idx);
        if strict_feasibility_margin(&sub) <= margin {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Non-positive off-diagonal entries and a non-negative inverse.
pub fn is_m_matrix<T: Scalar>(r: &Matrix<T>, tol: T) -> bool {
    if !r.is_square() {
        return false;
    }
    let d = r.rows();
    let z_pattern = (0..d).all(|i| (0..d).all(|j| i == j || r[(i, j)] <= tol));
    if !z_pattern {
        return false;
    }
    match r.inverse() {
        Ok(inv) => (0..d).all(|i| (0..d).all(|j| inv[(i, j)] >= -tol)),
        Err(_) => false,
    }
}

/// Lévy exponent of the driving Brownian motion, `⟨θ,μ⟩ + ½⟨θ,Σθ⟩`.
pub fn levy_exponent<T: Scalar>(spec: &ModelSpec<T>, theta: &[T]) -> T {
    assert_eq!(theta.len(), spec.d, "theta has the wrong dimension");
    let st = spec.sigma.mul_vec(theta);
    dot(theta, &spec.mu) + T::lit(0.5) * dot(theta, &st)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SkewSymmetry<T> {
    pub holds: bool,
    pub residual: T,
}

/// `R Δ_R⁻¹ Δ_Σ + Δ_Σ Δ_R⁻¹ Rᵀ`.
fn skew_rhs<T: Scalar>(sigma: &Matrix<T>, r: &Matrix<T>, dr_inv: &[T]) -> Matrix<T> {
    let ds = sigma.diag();
    let scale: Vec<T> = dr_inv.iter().zip(&ds).map(|(&a, &b)| a * b).collect();
    let left = r.matmul(&Matrix::from_diag(&scale));
    left.add(&left.transpose())
}

fn inverse_diag<T: Scalar>(r: &Matrix<T>) -> Result<Vec<T>> {
    r.diag()
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if v == T::zero() {
                Err(Error::DegenerateReflection { index: i })
            } else {
                Ok(T::one() / v)
            }
        })
        .collect()
}

pub fn check_skew_symmetry<T: Scalar>(spec: &ModelSpec<T>) -> Result<SkewSymmetry<T>> {
    check_skew_symmetry_tol(spec, T::lit(DEFAULT_MATRIX_TOL))
}

/// Max-abs residual of `2Σ − (RΔ_R⁻¹Δ_Σ + Δ_ΣΔ_R⁻¹Rᵀ)`.
pub fn check_skew_symmetry_tol<T: Scalar>(spec: &ModelSpec<T>, tol: T) -> Result<SkewSymmetry<T>> {
    let dr_inv = inverse_diag(&spec.refl)?;
    let rhs = skew_rhs(&spec.sigma, &spec.refl, &dr_inv);
    let residual = spec.sigma.scale(T::lit(2.0)).max_abs_diff(&rhs);
    Ok(SkewSymmetry {
        holds: residual < tol,
        residual,
    })
}

/// Which reading of the cross-block decomposability condition to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionForm {
    /// `2Σ^{KK} = R^{KK}Δ_{(R^{KK})⁻¹}Δ_{Σ^{KK}} + transpose` and
    /// `2Σ^{LK} = R^{LK}Δ_{R^{KK}}Δ_{(R^{KK})⁻¹}`, read off literally.
    AsPrinted,
    /// Block skew symmetry `2Σ^{KK} = R^{KK}Δ_{R^{KK}}⁻¹Δ_{Σ^{KK}} + transpose`
    /// and `2Σ^{LK} = R^{LK}Δ_{R^{KK}}⁻¹Δ_{Σ^{KK}}`.
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decomposability<T> {
    pub holds: bool,
    pub form: DecompositionForm,
    pub block_residual: T,
    pub cross_residual: T,
}

/// Evaluates the decomposability conditions for the partition `(K, L)` of
/// the 0-based coordinate set.
pub fn check_decomposability<T: Scalar>(
    spec: &ModelSpec<T>,
    k: &[usize],
    l: &[usize],
    form: DecompositionForm,
) -> Result<Decomposability<T>> {
    let d = spec.d;
    if k.is_empty() || l.is_empty() {
        return Err(Error::Config(
            "both partition blocks must be nonempty".into(),
        ));
    }
    let mut seen = vec![false; d];
    for &i in k.iter().chain(l) {
        if i >= d {
            return Err(Error::Config(format!("index {i} out of range for d={d}")));
        }
        if seen[i] {
            return Err(Error::Config(format!(
                "index {i} appears twice in the partition"
            )));
        }
        seen[i] = true;
    }
    if seen.iter().any(|&s| !s) {
        return Err(Error::Config(
            "partition does not cover every coordinate".into(),
        ));
    }

    let tol = T::lit(DEFAULT_MATRIX_TOL);
    let s_kk = spec.sigma.select(k, k);
    let r_kk = spec.refl.select(k, k);
    let s_lk = spec.sigma.select(l, k);
    let r_lk = spec.refl.select(l, k);
    let two = T::lit(2.0);

    let (block_rhs, cross_rhs) = match form {
        DecompositionForm::AsPrinted => {
            let inv_diag = r_kk.inverse()?.diag();
            let block = skew_rhs(&s_kk, &r_kk, &inv_diag);
            let scale: Vec<T> = r_kk
                .diag()
                .iter()
                .zip(&inv_diag)
                .map(|(&a, &b)| a * b)
                .collect();
            (block, r_lk.matmul(&Matrix::from_diag(&scale)))
        }
        DecompositionForm::Corrected => {
            let dr_inv = inverse_diag(&r_kk)?;
            let block = skew_rhs(&s_kk, &r_kk, &dr_inv);
            let scale: Vec<T> = dr_inv
                .iter()
                .zip(s_kk.diag())
                .map(|(&a, b)| a * b)
                .collect();
            (block, r_lk.matmul(&Matrix::from_diag(&scale)))
        }
    };
    let block_residual = s_kk.scale(two).max_abs_diff(&block_rhs);
    let cross_residual = s_lk.scale(two).max_abs_diff(&cross_rhs);
    Ok(Decomposability {
        holds: block_residual < tol && cross_residual < tol,
        form,
        block_residual,
        cross_residual,
    })
}

/// Expected local times per unit of sticky time, `E[L_i(T(1))]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalTimes<T> {
    pub values: Vec<T>,
    /// `‖A L̃ − μ‖∞` of the solved system.
    pub residual: T,
    pub condition: T,
    /// False when some entry is negative; such a model cannot be used for
    /// stationary estimation.
    pub usable: bool,
    pub warning: Option<String>,
}

impl<T: Scalar> LocalTimes<T> {
    /// Expected physical time per unit sticky time, `1 − Σ u_i L̃_i`.
    pub fn time_mass(&self, stickiness: &[T]) -> T {
        T::one() - dot(stickiness, &self.values)
    }
}

/// Solves `(μu' − R) L̃ = μ`.
///
/// The i-th coordinate of the reflected path is pushed by `Σ_j r_ij L_j`, so
/// taking `f(x) = exp(θ x_i)` in the adjoint relation yields row `i` of `R`.
pub fn expected_local_times<T: Scalar>(spec: &ModelSpec<T>) -> Result<LocalTimes<T>> {
    local_time_system(spec, &spec.refl)
}

/// Solves `(μu' − Rᵀ) L̃ = μ`, the transposed form of the system. Agrees with
/// [`expected_local_times`] whenever `R` is symmetric.
pub fn expected_local_times_transposed<T: Scalar>(spec: &ModelSpec<T>) -> Result<LocalTimes<T>> {
    local_time_system(spec, &spec.refl.transpose())
}

fn local_time_system<T: Scalar>(spec: &ModelSpec<T>, push: &Matrix<T>) -> Result<LocalTimes<T>> {
    let d = spec.d;
    let mut a = push.scale(-T::one());
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] += spec.mu[i] * spec.stickiness[j];
        }
    }
    let lu = a.lu().map_err(|_| Error::SingularSystem {
        condition: f64::INFINITY,
    })?;
    let condition = lu.condition();
    if !(condition < T::lit(SINGULAR_CONDITION)) {
        return Err(Error::SingularSystem {
            condition: condition.to_f64_lossy(),
        });
    }
    let values = lu.solve(&spec.mu)?;
    let back = a.mul_vec(&values);
    let residual = max_abs(
        &back
            .iter()
            .zip(&spec.mu)
            .map(|(&x, &m)| x - m)
            .collect::<Vec<_>>(),
    );
    let negative: Vec<usize> = (0..d).filter(|&i| values[i] < T::zero()).collect();
    let warning = (!negative.is_empty()).then(|| {
        format!(
            "negative expected local time at coordinates {negative:?}; the model is unstable or inconsistent"
        )
    });
    Ok(LocalTimes {
        usable: negative.is_empty(),
        values,
        residual,
        condition,
        warning,
    })
}

/// Per-coordinate stationary marginal under skew symmetry: an atom at zero
/// plus an exponential tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginalForm<T> {
    pub atom_mass: T,
    pub tail_mass: T,
    pub exp_rate: T,
}

/// Exponential rates `η = −2 Δ_Σ⁻¹ Δ_R R⁻¹ μ` of the product-form SRBM law.
pub fn product_form_rates<T: Scalar>(spec: &ModelSpec<T>) -> Result<Vec<T>> {
    let drift = spec.refl.solve(&spec.mu)?;
    Ok((0..spec.d)
        .map(|i| -T::lit(2.0) * spec.refl[(i, i)] * drift[i] / spec.sigma[(i, i)])
        .collect())
}

/// Skew-symmetric case: per-coordinate atom mass `u_i L̃_i` and exponential
/// rate `η_i`.
///
/// The rates are accepted only after the SRBM adjoint relation holds for the
/// candidate product measure on a θ-grid; otherwise the call fails with an
/// internal-consistency error.
pub fn product_form_marginals<T: Scalar>(spec: &ModelSpec<T>) -> Result<Vec<MarginalForm<T>>> {
    let skew = check_skew_symmetry(spec)?;
    if !skew.holds {
        return Err(Error::Precondition(format!(
            "skew symmetry fails (residual {:.3e})",
            skew.residual.to_f64_lossy()
        )));
    }
    let report = validate_model(spec);
    if !report.stable {
        return Err(Error::Precondition("model is not stable".into()));
    }
    let eta = product_form_rates(spec)?;
    let worst = product_form_bar_residual(spec, &eta)?;
    let tol = T::lit(DEFAULT_MATRIX_TOL).max(T::epsilon() * T::lit(1e3));
    if !(worst < tol) {
        return Err(Error::InternalConsistency {
            what: "product-form rates".into(),
            residual: worst.to_f64_lossy(),
        });
    }
    let lt = expected_local_times(spec)?;
    Ok((0..spec.d)
        .map(|i| {
            let atom = spec.stickiness[i] * lt.values[i];
            MarginalForm {
                atom_mass: atom,
                tail_mass: T::one() - atom,
                exp_rate: eta[i],
            }
        })
        .collect())
}

/// Worst scaled residual of `−Ψ(θ)Φ₀(θ) = Σ_i Φ_i(θ)⟨θ,R_i⟩` for the
/// product-of-exponentials law with boundary masses `−R⁻¹μ`.
fn product_form_bar_residual<T: Scalar>(spec: &ModelSpec<T>, eta: &[T]) -> Result<T> {
    let d = spec.d;
    let masses: Vec<T> = spec.refl.solve(&spec.mu)?.into_iter().map(|v| -v).collect();
    let multipliers = [0.0, 0.25, 0.5, 1.0, 2.0];
    let mut worst = T::zero();
    let mut eval = |theta: &[T]| {
        let factors: Vec<T> = (0..d).map(|k| eta[k] / (eta[k] - theta[k])).collect();
        let phi0: T = factors.iter().copied().fold(T::one(), |a, b| a * b);
        let lhs = -levy_exponent(spec, theta) * phi0;
        let rhs: T = (0..d)
            .map(|i| {
                let face = (0..d)
                    .filter(|&k| k != i)
                    .fold(masses[i], |a, k| a * factors[k]);
                face * dot(theta, &spec.refl.column(i))
            })
            .sum();
        let scale = T::one().max(lhs.abs()).max(rhs.abs());
        worst = worst.max((lhs - rhs).abs() / scale);
    };
    if d <= 4 {
        let total = multipliers.len().pow(d as u32);
        let mut theta = vec![T::zero(); d];
        for code in 0..total {
            let mut c = code;
            for (k, th) in theta.iter_mut().enumerate() {
                *th = -T::lit(multipliers[c % multipliers.len()]) * eta[k];
                c /= multipliers.len();
            }
            eval(&theta);
        }
    } else {
        for &m in &multipliers {
            let diag: Vec<T> = eta.iter().map(|&e| -T::lit(m) * e).collect();
            eval(&diag);
            for axis in 0..d {
                let mut th = vec![T::zero(); d];
                th[axis] = -T::lit(m) * eta[axis];
                eval(&th);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn spec(sigma: &[Vec<f64>], mu: &[f64], r: &[Vec<f64>], u: &[f64]) -> ModelSpec<f64> {
        ModelSpec::from_f64(sigma, mu, r, u).unwrap()
    }

    fn m2() -> ModelSpec<f64> {
        spec(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[-1.0, -1.0],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[1.0, 1.0],
        )
    }

    fn m3() -> ModelSpec<f64> {
        spec(
            &[vec![1.0, 0.5], vec![0.5, 1.0]],
            &[-1.0, -2.0],
            &[vec![1.0, 0.0], vec![-0.3, 1.0]],
            &[1.0, 1.0],
        )
    }

    fn m1() -> ModelSpec<f64> {
        spec(&[vec![1.0]], &[-1.0], &[vec![1.0]], &[1.0])
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let err = ModelSpec::<f64>::from_f64(&[vec![1.0]], &[-1.0, -1.0], &[vec![1.0]], &[1.0]);
        assert!(matches!(err, Err(Error::Config(_))));
        let neg_u = ModelSpec::<f64>::from_f64(&[vec![1.0]], &[-1.0], &[vec![1.0]], &[-0.5]);
        assert!(matches!(neg_u, Err(Error::Config(_))));
    }

    #[test]
    fn validate_identity_model() {
        let r = validate_model(&m2());
        assert!(r.stable && r.completely_s_ok && r.skew_symmetric && r.spd_ok && r.m_matrix);
    }

    #[test]
    fn validate_positive_drift_is_unstable() {
        let s = spec(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[1.0, 1.0],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[1.0, 1.0],
        );
        let r = validate_model(&s);
        assert!(!r.stable);
        assert!(r.completely_s_ok);
    }

    #[test]
    fn validate_triangular_reflection() {
        let r = validate_model(&m3());
        assert!(r.stable && r.m_matrix && r.completely_s_ok);
        assert!(!r.skew_symmetric);
        let drift = m3().refl.solve(&m3().mu).unwrap();
        assert_abs_diff_eq!(drift[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(drift[1], -2.3, epsilon = 1e-15);
    }

    #[test]
    fn asymmetric_sigma_is_recorded_not_fatal() {
        let s = spec(
            &[vec![1.0, 0.2], vec![0.0, 1.0]],
            &[-1.0, -1.0],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[1.0, 1.0],
        );
        let r = validate_model(&s);
        assert!(!r.spd_ok);
        assert!(r.messages.iter().any(|m| m.contains("not symmetric")));
    }

    #[test]
    fn completely_s_examples() {
        for d in 1..=5 {
            assert!(is_completely_s(&Matrix::<f64>::identity(d)).unwrap());
        }
        let bad = Matrix::from_rows(&[vec![1.0, -2.0], vec![-2.0, 1.0]]).unwrap();
        assert!(!is_completely_s(&bad).unwrap());
        let tri = Matrix::from_rows(&[vec![1.0, 0.0], vec![-0.3, 1.0]]).unwrap();
        assert!(is_completely_s(&tri).unwrap());
        // 1x1 minors negative
        let neg = Matrix::from_rows(&[vec![-1.0]]).unwrap();
        assert!(!is_completely_s(&neg).unwrap());
    }

    #[test]
    fn completely_s_dimension_bound() {
        let big = Matrix::<f64>::identity(17);
        assert_eq!(
            is_completely_s(&big),
            Err(Error::UnsupportedDimension { dim: 17, max: 16 })
        );
    }

    #[test]
    fn levy_exponent_examples() {
        assert_eq!(levy_exponent(&m3(), &[0.0, 0.0]), 0.0);
        assert_abs_diff_eq!(levy_exponent(&m1(), &[-1.0]), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(levy_exponent(&m3(), &[-1.0, -1.0]), 4.5, epsilon = 1e-15);
    }

    #[test]
    fn skew_symmetry_examples() {
        let s = check_skew_symmetry(&m2()).unwrap();
        assert!(s.holds);
        assert_eq!(s.residual, 0.0);

        let s = check_skew_symmetry(&m3()).unwrap();
        assert!(!s.holds);
        assert_abs_diff_eq!(s.residual, 1.3, epsilon = 1e-12);

        let rho = 0.25;
        let sk = spec(
            &[vec![1.0, rho], vec![rho, 1.0]],
            &[-1.0, -1.0],
            &[vec![1.0, 2.0 * rho], vec![0.0, 1.0]],
            &[1.0, 1.0],
        );
        let s = check_skew_symmetry(&sk).unwrap();
        assert!(s.holds);
        assert_eq!(s.residual, 0.0);
    }

    #[test]
    fn skew_symmetry_zero_diagonal() {
        let s = spec(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[-1.0, -1.0],
            &[vec![0.0, 1.0], vec![1.0, 1.0]],
            &[1.0, 1.0],
        );
        assert_eq!(
            check_skew_symmetry(&s),
            Err(Error::DegenerateReflection { index: 0 })
        );
    }

    #[test]
    fn decomposability_examples() {
        for form in [DecompositionForm::AsPrinted, DecompositionForm::Corrected] {
            let r = check_decomposability(&m2(), &[0], &[1], form).unwrap();
            assert!(r.holds);
            assert_eq!(r.block_residual, 0.0);
            assert_eq!(r.cross_residual, 0.0);
        }
        let r = check_decomposability(&m3(), &[0], &[1], DecompositionForm::Corrected).unwrap();
        assert!(!r.holds);
        assert_abs_diff_eq!(r.cross_residual, 1.3, epsilon = 1e-12);

        // two decoupled 2x2 blocks
        let s = spec(
            &[
                vec![1.0, 0.3, 0.0, 0.0],
                vec![0.3, 2.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.5],
            ],
            &[-1.0, -1.0, -1.0, -1.0],
            &[
                vec![1.0, 0.3, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
            &[0.0; 4],
        );
        let r = check_decomposability(&s, &[0, 1], &[2, 3], DecompositionForm::Corrected).unwrap();
        assert!(r.holds, "{r:?}");
    }

    #[test]
    fn decomposability_bad_partition() {
        assert!(matches!(
            check_decomposability(&m2(), &[0], &[0], DecompositionForm::Corrected),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            check_decomposability(&m2(), &[0], &[], DecompositionForm::Corrected),
            Err(Error::Config(_))
        ));
        let s3 = spec(
            &[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            &[-1.0; 3],
            &[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            &[0.0; 3],
        );
        assert!(matches!(
            check_decomposability(&s3, &[0], &[1], DecompositionForm::Corrected),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn expected_local_times_examples() {
        let lt = expected_local_times(&m1()).unwrap();
        assert_abs_diff_eq!(lt.values[0], 0.5, epsilon = 1e-15);
        let lt = expected_local_times(&m2()).unwrap();
        assert_abs_diff_eq!(lt.values[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lt.values[1], 1.0 / 3.0, epsilon = 1e-15);
        assert!(lt.usable);
        let srbm = expected_local_times(&m2().srbm()).unwrap();
        assert_eq!(srbm.values, vec![1.0, 1.0]);
    }

    #[test]
    fn local_time_orientations_differ_for_nonsymmetric_r() {
        let a = expected_local_times(&m3()).unwrap();
        let b = expected_local_times_transposed(&m3()).unwrap();
        assert!((a.values[1] - b.values[1]).abs() > 1e-3);
        // u = 0: reduces to R L = -mu
        let s = m3().srbm();
        let lt = expected_local_times(&s).unwrap();
        let back = s.refl.mul_vec(&lt.values);
        assert_abs_diff_eq!(back[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(back[1], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn negative_local_time_warns() {
        let s = spec(&[vec![1.0]], &[1.0], &[vec![1.0]], &[0.0]);
        let lt = expected_local_times(&s).unwrap();
        assert!(!lt.usable);
        assert!(lt.warning.is_some());
    }

    #[test]
    fn singular_local_time_system() {
        // mu u' - R = 0 when u = 1, mu = 1, R = 1
        let s = spec(&[vec![1.0]], &[1.0], &[vec![1.0]], &[1.0]);
        assert!(matches!(
            expected_local_times(&s),
            Err(Error::SingularSystem { .. })
        ));
    }

    #[test]
    fn product_form_examples() {
        let m = product_form_marginals(&m1()).unwrap();
        assert_abs_diff_eq!(m[0].atom_mass, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m[0].exp_rate, 2.0, epsilon = 1e-15);

        let m = product_form_marginals(&m2()).unwrap();
        for f in &m {
            assert_abs_diff_eq!(f.atom_mass, 1.0 / 3.0, epsilon = 1e-15);
            assert_abs_diff_eq!(f.exp_rate, 2.0, epsilon = 1e-15);
            assert_abs_diff_eq!(f.tail_mass, 2.0 / 3.0, epsilon = 1e-15);
        }

        let s = spec(&[vec![2.0]], &[-0.5], &[vec![1.0]], &[0.0]);
        let m = product_form_marginals(&s).unwrap();
        assert_eq!(m[0].atom_mass, 0.0);
        assert_abs_diff_eq!(m[0].exp_rate, 2.0 * 0.5 / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn product_form_nonsymmetric_skew_model() {
        let rho = 0.25;
        let sk = spec(
            &[vec![1.0, rho], vec![rho, 1.0]],
            &[-1.0, -1.0],
            &[vec![1.0, 2.0 * rho], vec![0.0, 1.0]],
            &[0.5, 2.0],
        );
        let m = product_form_marginals(&sk).unwrap();
        // R^-1 mu = (-0.5, -1) -> eta = (1, 2)
        assert_abs_diff_eq!(m[0].exp_rate, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m[1].exp_rate, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn product_form_requires_skew_symmetry() {
        assert!(matches!(
            product_form_marginals(&m3()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn product_form_f32() {
        let s: ModelSpec<f32> =
            ModelSpec::from_f64(&[vec![1.0]], &[-1.0], &[vec![1.0]], &[1.0]).unwrap();
        let m = product_form_marginals(&s).unwrap();
        assert!((m[0].atom_mass - 0.5).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn levy_exponent_is_quadratic(a in -3.0f64..3.0, t0 in -2.0f64..2.0, t1 in -2.0f64..2.0) {
            let s = m3();
            let theta = [t0, t1];
            let lin = t0 * s.mu[0] + t1 * s.mu[1];
            let quad = levy_exponent(&s, &theta) - lin;
            let scaled: Vec<f64> = theta.iter().map(|t| a * t).collect();
            let expected = a * lin + a * a * quad;
            prop_assert!((levy_exponent(&s, &scaled) - expected).abs() < 1e-12);
        }

        #[test]
        fn completely_s_permutation_invariant(
            entries in proptest::collection::vec(-2.0f64..2.0, 9),
            perm_idx in 0usize..6,
        ) {
            let perms = [[0,1,2],[0,2,1],[1,0,2],[1,2,0],[2,0,1],[2,1,0]];
            let p = perms[perm_idx];
            let rows: Vec<Vec<f64>> = (0..3).map(|i| entries[i*3..i*3+3].to_vec()).collect();
            let r = Matrix::from_rows(&rows).unwrap();
            let permuted = r.select(&p, &p);
            prop_assert_eq!(is_completely_s(&r).unwrap(), is_completely_s(&permuted).unwrap());
        }

        #[test]
        fn local_time_residual_small(
            u0 in 0.0f64..3.0, u1 in 0.0f64..3.0,
            m0 in -2.0f64..-0.1, m1v in -2.0f64..-0.1,
            off in -0.5f64..0.0,
        ) {
            let s = spec(
                &[vec![1.0, 0.0], vec![0.0, 1.0]],
                &[m0, m1v],
                &[vec![1.0, off], vec![off, 1.0]],
                &[u0, u1],
            );
            let lt = expected_local_times(&s).unwrap();
            prop_assert!(lt.residual < 1e-10);
        }

        #[test]
        fn identity_srbm_local_times_are_minus_mu(m0 in -5.0f64..-0.01, m1v in -5.0f64..-0.01) {
            let s = spec(
                &[vec![1.0, 0.0], vec![0.0, 1.0]],
                &[m0, m1v],
                &[vec![1.0, 0.0], vec![0.0, 1.0]],
                &[0.0, 0.0],
            );
            let lt = expected_local_times(&s).unwrap();
            prop_assert_eq!(lt.values, vec![-m0, -m1v]);
        }

        #[test]
        fn skew_outcome_invariant_under_diagonal_rescaling(
            d0 in 0.2f64..5.0, d1 in 0.2f64..5.0, e0 in 0.2f64..5.0, e1 in 0.2f64..5.0,
            rho in -0.45f64..0.45, skew in proptest::bool::ANY,
        ) {
            let sigma = Matrix::from_rows(&[vec![1.0, rho], vec![rho, 1.0]]).unwrap();
            let r12 = if skew { 2.0 * rho } else { 2.0 * rho + 0.5 };
            let r = Matrix::from_rows(&[vec![1.0, r12], vec![0.0, 1.0]]).unwrap();
            let base = ModelSpec::new(sigma.clone(), vec![-1.0, -1.0], r.clone(), vec![1.0, 1.0]).unwrap();
            let dm = Matrix::from_diag(&[d0, d1]);
            let em = Matrix::from_diag(&[e0, e1]);
            let scaled = ModelSpec::new(
                dm.matmul(&sigma).matmul(&dm),
                vec![-1.0, -1.0],
                dm.matmul(&r).matmul(&em),
                vec![1.0, 1.0],
            ).unwrap();
            let a = check_skew_symmetry(&base).unwrap();
            let b = check_skew_symmetry(&scaled).unwrap();
            prop_assert_eq!(a.holds, skew);
            prop_assert_eq!(a.holds, b.holds);
        }

        #[test]
        fn product_form_masses_partition_unity(u0 in 0.0f64..4.0, u1 in 0.0f64..4.0) {
            let s = m2().with_stickiness(vec![u0, u1]).unwrap();
            for f in product_form_marginals(&s).unwrap() {
                prop_assert!((0.0..=1.0).contains(&f.atom_mass));
                prop_assert!((f.atom_mass + f.tail_mass - 1.0).abs() < 1e-12);
            }
        }
    }
}
