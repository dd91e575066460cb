//! Dense matrix types and the spectral primitives used throughout the crate:
//! spectral radius (dense Schur or power iteration), spectral norm, symmetric
//! eigenvalue bounds and left Perron vectors.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

/// A dense real square matrix with finite entries and side at least one.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix(DMatrix<f64>);

impl SquareMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.nrows() != m.ncols() {
            return Err(Error::invalid(format!(
                "matrix must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        Ok(SquareMatrix(m))
    }

    /// Wraps a matrix produced internally from valid inputs.
    pub(crate) fn from_trusted(m: DMatrix<f64>) -> Self {
        debug_assert!(m.nrows() == m.ncols() && m.nrows() > 0);
        SquareMatrix(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("matrix has no rows"));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::invalid(format!(
                "row {i} has {} entries, expected {n}",
                r.len()
            )));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn identity(n: usize) -> Self {
        SquareMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SquareMatrix(DMatrix::zeros(n, n))
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn mul(&self, other: &SquareMatrix) -> SquareMatrix {
        SquareMatrix(&self.0 * &other.0)
    }

    pub fn scale(&self, c: f64) -> SquareMatrix {
        SquareMatrix(&self.0 * c)
    }

    pub fn transpose(&self) -> SquareMatrix {
        SquareMatrix(self.0.transpose())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| self.0.row(i).iter().copied().collect())
            .collect()
    }

    pub fn is_entrywise_nonnegative(&self, slack: f64) -> bool {
        self.0.iter().all(|&v| v >= -slack)
    }
}

impl Deref for SquareMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Symmetric matrix together with its extreme eigenvalues.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricMatrix {
    entries: DMatrix<f64>,
    min_eigenvalue: f64,
    max_eigenvalue: f64,
}

impl SymmetricMatrix {
    /// Stores `(m + mᵀ)/2`, so symmetry is exact.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let sq = SquareMatrix::new(m)?.into_inner();
        let entries = (&sq + sq.transpose()) * 0.5;
        let (min_eigenvalue, max_eigenvalue) = symmetric_extreme_eigenvalues(&entries);
        Ok(SymmetricMatrix {
            entries,
            min_eigenvalue,
            max_eigenvalue,
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.max_eigenvalue
    }

    pub fn is_positive_definite(&self) -> bool {
        self.min_eigenvalue > 0.0
    }

    /// Quadratic form `yᵀ H y`.
    pub fn quadratic_form(&self, y: &DVector<f64>) -> f64 {
        y.dot(&(&self.entries * y))
    }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn symmetric_extreme_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.singular_values().max()
}

/// Eigensolver policy for spectral radii.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenSettings {
    /// Matrices up to this side use a dense Schur decomposition.
    pub dense_limit: usize,
    /// Convergence tolerance on the power-iteration estimate increment.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for EigenSettings {
    fn default() -> Self {
        EigenSettings {
            dense_limit: 512,
            tol: 1e-10,
            max_iters: 10_000,
        }
    }
}

pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    spectral_radius_with(m, &EigenSettings::default())
}

pub fn spectral_radius_with(m: &DMatrix<f64>, settings: &EigenSettings) -> Result<f64> {
    let n = m.nrows();
    if n != m.ncols() || n == 0 {
        return Err(Error::invalid("spectral radius needs a nonempty square matrix"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigensolverFailure("non-finite matrix entries".into()));
    }
    if n == 1 {
        return Ok(m[(0, 0)].abs());
    }
    if n <= settings.dense_limit {
        match dense_spectral_radius(m) {
            Err(_) if m.iter().all(|&v| v >= 0.0) => {}
            r => return r,
        }
    }
    if m.iter().all(|&v| v >= 0.0) {
        nonnegative_power_iteration(m, settings)
    } else {
        power_iteration(m, settings)
    }
}

fn dense_spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows().max(10);
    // deflation at machine epsilon stalls on clustered spectra (Kronecker
    // powers have many repeated eigenvalues) and on large nilpotent parts.
    // Converging runs need about 3n sweeps, so stalls are cut short and
    // retried looser or on the transpose (same spectrum, different
    // Hessenberg form).
    let attempts = [
        (false, 1e-14),
        (false, 1e-12),
        (true, 1e-12),
        (false, 1e-10),
        (true, 1e-10),
    ];
    for (transpose, eps) in attempts {
        let a = if transpose { m.transpose() } else { m.clone() };
        if let Some(schur) = Schur::try_new(a, eps, 10 * n) {
            return Ok(schur
                .complex_eigenvalues()
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max));
        }
    }
    Err(Error::EigensolverFailure("Schur iteration did not converge".into()))
}

/// Power iteration on `M + I` from the all-ones vector. For nonnegative `M`
/// the shift makes the Perron root strictly dominant, so the Collatz–Wielandt
/// quotients bracket ρ(M) and converge.
fn nonnegative_power_iteration(m: &DMatrix<f64>, settings: &EigenSettings) -> Result<f64> {
    let n = m.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut prev = f64::INFINITY;
    for _ in 0..settings.max_iters {
        let w = m * &v + &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            if v[i] > 0.0 {
                let r = w[i] / v[i];
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        if hi - lo <= settings.tol * hi.max(1.0) {
            return Ok((0.5 * (lo + hi) - 1.0).max(0.0));
        }
        let estimate = v.dot(&w) - 1.0;
        if (estimate - prev).abs() <= settings.tol {
            return Ok(estimate.max(0.0));
        }
        prev = estimate;
        v = w / norm;
    }
    Err(Error::EigensolverFailure(format!(
        "power iteration did not converge in {} iterations",
        settings.max_iters
    )))
}

fn power_iteration(m: &DMatrix<f64>, settings: &EigenSettings) -> Result<f64> {
    let n = m.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut prev = f64::INFINITY;
    for _ in 0..settings.max_iters {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        if (norm - prev).abs() <= settings.tol * norm.max(1.0) {
            return Ok(norm);
        }
        prev = norm;
        v = w / norm;
    }
    Err(Error::EigensolverFailure(format!(
        "power iteration did not converge in {} iterations",
        settings.max_iters
    )))
}

/// Spectral radius and left Perron vector (eigenvector of `Mᵀ` for ρ(M)) of
/// an entrywise positive matrix, scaled so the last component equals one.
pub fn left_perron_vector(m: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let n = m.nrows();
    if m.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("left Perron vector needs an entrywise positive matrix"));
    }
    let rho = spectral_radius(m)?;
    if n == 1 {
        return Ok((rho, DVector::from_element(1, 1.0)));
    }
    // Inverse iteration on Mᵀ with a shift just above the simple Perron root.
    let mt = m.transpose();
    let mut v = DVector::from_element(n, 1.0);
    let mut shift_gap = 1e-10 * rho.max(f64::MIN_POSITIVE);
    for _attempt in 0..8 {
        let shifted = &mt - DMatrix::identity(n, n) * (rho + shift_gap);
        let lu = shifted.lu();
        let mut ok = true;
        for _ in 0..6 {
            match lu.solve(&v) {
                Some(w) if w.iter().all(|x| x.is_finite()) && w.norm() > 0.0 => {
                    v = &w / w.norm();
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            break;
        }
        v = DVector::from_element(n, 1.0);
        shift_gap *= 10.0;
    }
    if v[n - 1] < 0.0 {
        v = -v;
    }
    if v.iter().any(|&x| x <= 0.0) {
        return Err(Error::EigensolverFailure(
            "left Perron vector is not strictly positive".into(),
        ));
    }
    let last = v[n - 1];
    Ok((rho, v / last))
}

/// `vec` in column-major order (nalgebra storage order).
pub(crate) fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub(crate) fn unvec(v: &DVector<f64>, side: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(side, side, v.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn square_matrix_rejects_bad_shapes() {
        assert!(SquareMatrix::new(DMatrix::zeros(2, 3)).is_err());
        assert!(SquareMatrix::new(DMatrix::zeros(0, 0)).is_err());
        assert!(SquareMatrix::from_rows(&[vec![1.0, f64::NAN], vec![0.0, 1.0]]).is_err());
        assert!(SquareMatrix::from_rows(&[vec![1.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn dense_radius_of_rotation_and_triangular() {
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -2.0, 2.0, 0.0]);
        assert_relative_eq!(spectral_radius(&rot).unwrap(), 2.0, epsilon = 1e-12);
        let tri = DMatrix::from_row_slice(2, 2, &[0.5, 100.0, 0.0, -0.7]);
        assert_relative_eq!(spectral_radius(&tri).unwrap(), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn power_iteration_agrees_with_dense_on_nonnegative() {
        let m = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.1);
        let dense = spectral_radius(&m).unwrap();
        let settings = EigenSettings {
            dense_limit: 1,
            ..Default::default()
        };
        let iter = spectral_radius_with(&m, &settings).unwrap();
        assert_relative_eq!(dense, iter, epsilon = 1e-8);
    }

    #[test]
    fn power_iteration_handles_periodic_nonnegative() {
        // permutation matrix: eigenvalues on the unit circle
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let settings = EigenSettings {
            dense_limit: 1,
            ..Default::default()
        };
        assert_relative_eq!(spectral_radius_with(&m, &settings).unwrap(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn left_perron_vector_of_positive_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[0.75, 0.9, 0.075, 0.6]);
        let (rho, f) = left_perron_vector(&m).unwrap();
        let lhs = m.transpose() * &f;
        assert_relative_eq!(lhs, &f * rho, epsilon = 1e-12);
        assert_eq!(f[1], 1.0);
    }

    #[test]
    fn symmetric_matrix_eigen_bounds() {
        let h = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert_relative_eq!(h.min_eigenvalue(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(h.max_eigenvalue(), 3.0, epsilon = 1e-12);
        assert!(h.is_positive_definite());
    }

    #[test]
    fn spectral_norm_of_diag() {
        let m = DMatrix::from_row_slice(2, 2, &[-3.0, 0.0, 0.0, 2.0]);
        assert_relative_eq!(spectral_norm(&m), 3.0, epsilon = 1e-12);
    }
}
