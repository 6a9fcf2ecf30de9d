//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};

pub type Vec9 = SVector<f64, 9>;
pub type Vec4 = SVector<f64, 4>;
pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Mat94 = SMatrix<f64, 9, 4>;
pub type Mat49 = SMatrix<f64, 4, 9>;
pub type Mat4 = SMatrix<f64, 4, 4>;

/// `(A + Aᵀ) / 2`
pub fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn sym9(a: &Mat9) -> Mat9 {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = sym(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

pub fn lambda_min(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).first().copied().unwrap_or(f64::NAN)
}

pub fn lambda_max(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).last().copied().unwrap_or(f64::NAN)
}

pub fn lambda_min9(a: &Mat9) -> f64 {
    sym9(a).symmetric_eigenvalues().min()
}

pub fn lambda_max9(a: &Mat9) -> f64 {
    sym9(a).symmetric_eigenvalues().max()
}

pub fn is_spd(a: &DMatrix<f64>) -> bool {
    a.is_square() && a.iter().all(|x| x.is_finite()) && sym(a).cholesky().is_some()
}

/// Symmetric square root and inverse square root of an SPD matrix.
pub fn spd_sqrt_pair(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let eig = sym(a).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return None;
    }
    let v = &eig.eigenvectors;
    let sq = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let isq = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Some((v * sq * v.transpose(), v * isq * v.transpose()))
}

/// Clamp the spectrum of a symmetric matrix from below.
pub fn floor_eigenvalues(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = sym(a).symmetric_eigen();
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(floor)));
    sym(&(v * d * v.transpose()))
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Wrap an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Largest singular value by power iteration on `AᵀA` from a fixed start vector.
pub fn power_iteration_sigma(a: &DMatrix<f64>, iters: usize) -> f64 {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return 0.0;
    }
    let mut v = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..iters {
        let w = a.transpose() * (a * &v);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        sigma = (a * &v).norm();
    }
    sigma
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

pub fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_stays_in_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn hat_vee_inverse() {
        let v = Vector3::new(0.3, -1.2, 2.0);
        assert_eq!(vee(&hat(&v)), v);
        let w = Vector3::new(-0.5, 0.1, 0.7);
        assert!((hat(&v) * w - v.cross(&w)).norm() < 1e-15);
    }

    #[test]
    fn power_iteration_matches_svd() {
        let a = DMatrix::from_fn(5, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5);
        let exact = spectral_norm(&a);
        assert!((power_iteration_sigma(&a, 200) - exact).abs() < 1e-8 * exact);
    }

    #[test]
    fn eigen_floor() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1e-12, 2.0]));
        let f = floor_eigenvalues(&a, 1e-6);
        assert!((lambda_min(&f) - 1e-6).abs() < 1e-15);
        assert!((lambda_max(&f) - 2.0).abs() < 1e-12);
    }
}
