//! Small complex linear-algebra helpers used throughout the library.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Dense complex matrix.
pub type CMat = DMatrix<Complex64>;
/// Dense complex column vector.
pub type CVec = DVector<Complex64>;

/// Shorthand complex constructor.
#[inline]
pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Unnormalized DFT matrix: entry (p, q) = exp(-j 2 pi p q / n).
///
/// The product `p * q` is reduced mod `n` before the angle is formed so the
/// trig argument stays in [0, 2 pi) regardless of size.
pub fn dft_matrix(n: usize) -> CMat {
    CMat::from_fn(n, n, |p, q| {
        let twiddle = (p * q) % n;
        Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * twiddle as f64 / n as f64)
    })
}

/// Unitary DFT matrix (unnormalized DFT scaled by 1/sqrt(n)).
pub fn unitary_dft(n: usize) -> CMat {
    dft_matrix(n) / c64((n as f64).sqrt(), 0.0)
}

/// Largest entry magnitude of A - A^H.
pub fn hermitian_error(a: &CMat) -> f64 {
    let diff = a - a.adjoint();
    diff.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(a: &CMat) -> Vec<f64> {
    let mut eigs: Vec<f64> = a.clone().symmetric_eigenvalues().iter().copied().collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eigs
}

/// Solve A X = B for Hermitian positive-definite A.
///
/// Tries a Cholesky factorization first. On failure the system is re-solved
/// with a ridge `reg_eps * mean(diag) * I` added (when `reg_eps > 0`), and
/// as a last resort through an LU factorization. Fallbacks are logged.
pub fn solve_hermitian(a: &CMat, b: &CMat, reg_eps: f64) -> Result<CMat> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return Err(Error::shape(format!(
            "solve_hermitian: A is {}x{}, B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    if reg_eps > 0.0 {
        let n = a.nrows();
        let scale: f64 = a.diagonal().iter().map(|z| z.re).sum::<f64>() / n as f64;
        let ridge = reg_eps * scale.abs().max(f64::MIN_POSITIVE);
        let regularized = a + CMat::identity(n, n) * c64(ridge, 0.0);
        if let Some(chol) = regularized.clone().cholesky() {
            log::warn!("solve_hermitian: Cholesky failed, ridge {ridge:.3e} applied");
            return Ok(chol.solve(b));
        }
    }
    match a.clone().lu().solve(b) {
        Some(x) => {
            log::warn!("solve_hermitian: Cholesky failed, fell back to LU");
            Ok(x)
        }
        None => Err(Error::singular(
            "solve_hermitian: matrix singular even under LU".to_string(),
        )),
    }
}

/// Inverse of a Hermitian positive-definite matrix (same fallbacks as
/// [`solve_hermitian`]).
pub fn invert_hermitian(a: &CMat, reg_eps: f64) -> Result<CMat> {
    let n = a.nrows();
    solve_hermitian(a, &CMat::identity(n, n), reg_eps)
}

/// Column-major vectorization of a matrix.
pub fn vectorize(m: &CMat) -> CVec {
    CVec::from_iterator(m.nrows() * m.ncols(), m.iter().copied())
}

/// Inverse of [`vectorize`].
pub fn unvectorize(v: &CVec, rows: usize, cols: usize) -> CMat {
    assert_eq!(v.len(), rows * cols, "unvectorize: length mismatch");
    CMat::from_iterator(rows, cols, v.iter().copied())
}

/// Vector of i.i.d. circularly-symmetric unit-variance complex Gaussians.
pub fn complex_gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CVec {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    CVec::from_fn(n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c64(re * scale, im * scale)
    })
}

/// Matrix of i.i.d. circularly-symmetric unit-variance complex Gaussians,
/// drawn column by column.
pub fn complex_gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMat {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    CMat::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c64(re * scale, im * scale)
    })
}

/// Vector of independent unit-modulus entries with uniform random phases.
pub fn random_unit_modulus<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CVec {
    CVec::from_fn(n, |_, _| {
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        Complex64::from_polar(1.0, phase)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dft_is_orthogonal() {
        for n in [1usize, 2, 3, 8] {
            let f = dft_matrix(n);
            let gram = f.adjoint() * &f;
            let expected = CMat::identity(n, n) * c64(n as f64, 0.0);
            assert!((gram - expected).norm() < 1e-12 * n as f64);
        }
    }

    #[test]
    fn unitary_dft_is_unitary() {
        let f = unitary_dft(5);
        let gram = f.adjoint() * &f;
        assert!((gram - CMat::identity(5, 5)).norm() < 1e-13);
    }

    #[test]
    fn solve_hermitian_recovers_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = complex_gaussian_matrix(&mut rng, 4, 4);
        // A = B B^H + I is Hermitian positive definite.
        let a = &b * b.adjoint() + CMat::identity(4, 4);
        let x_true = complex_gaussian_matrix(&mut rng, 4, 2);
        let rhs = &a * &x_true;
        let x = solve_hermitian(&a, &rhs, 0.0).unwrap();
        assert!((x - x_true).norm() < 1e-10);
    }

    #[test]
    fn solve_hermitian_rejects_shape_mismatch() {
        let a = CMat::identity(3, 3);
        let b = CMat::identity(4, 4);
        assert!(matches!(
            solve_hermitian(&a, &b, 0.0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn vectorize_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = complex_gaussian_matrix(&mut rng, 3, 5);
        let v = vectorize(&m);
        assert_eq!(unvectorize(&v, 3, 5), m);
        // Column-major: entry (1, 2) sits at offset 2 * 3 + 1.
        assert_eq!(v[2 * 3 + 1], m[(1, 2)]);
    }

    #[test]
    fn complex_gaussian_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = complex_gaussian_vector(&mut rng, 200_000);
        let power: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len() as f64;
        assert!((power - 1.0).abs() < 0.02, "power {power}");
    }

    #[test]
    fn random_unit_modulus_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_unit_modulus(&mut rng, 64);
        for z in v.iter() {
            assert!((z.norm() - 1.0).abs() < 1e-14);
        }
    }
}
