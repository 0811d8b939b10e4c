//! Dense complex kernels shared by the realizability checker and the filter
//! synthesis: eigenvalues, Bartels-Stewart Lyapunov solves, inverses.

use nalgebra::{Schur, SymmetricEigen, SVD};
use num_complex::Complex64;
use thiserror::Error;

use crate::doubled::{hermitian_part, max_abs, CMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is singular or numerically singular")]
    Singular,
    #[error("Lyapunov operator is singular (min |λi + conj λj| = {gap:.3e})")]
    SingularLyapunov { gap: f64 },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0} did not converge")]
    NoConvergence(&'static str),
}

const MAX_SWEEPS: usize = 500;

/// Fixed unitary used to restart a stalled iteration from a different basis.
fn reflector(n: usize) -> CMatrix {
    let v = CMatrix::from_fn(n, 1, |i, _| Complex64::new(1.0 + i as f64, 0.5 * i as f64));
    let v = &v / Complex64::new(fro_norm(&v), 0.0);
    CMatrix::identity(n, n) - (&v * v.adjoint()).scale(2.0)
}

/// Complex Schur form `A = U T U†`. The QR iteration is capped; if it
/// stalls, it is rerun on `Q A Q†` for a fixed reflector `Q`.
pub fn schur(a: &CMatrix) -> Result<(CMatrix, CMatrix), LinalgError> {
    let n = ensure_square(a)?;
    if let Some(s) = Schur::try_new(a.clone(), f64::EPSILON, MAX_SWEEPS * n.max(1)) {
        return Ok(s.unpack());
    }
    log::debug!("Schur iteration stalled on {a:?}; retrying in a rotated basis");
    let q = reflector(n);
    let s = Schur::try_new(&q * a * q.adjoint(), f64::EPSILON, MAX_SWEEPS * n.max(1))
        .ok_or(LinalgError::NoConvergence("Schur decomposition"))?;
    let (u, t) = s.unpack();
    Ok((q.adjoint() * u, t))
}

/// Singular value decomposition with a capped iteration; retried on the
/// adjoint when it stalls.
pub fn svd(
    a: &CMatrix,
    compute_u: bool,
    compute_v: bool,
) -> Result<SVD<Complex64, nalgebra::Dyn, nalgebra::Dyn>, LinalgError> {
    let cap = MAX_SWEEPS * a.nrows().max(a.ncols()).max(1);
    if let Some(s) = SVD::try_new(a.clone(), compute_u, compute_v, f64::EPSILON, cap) {
        return Ok(s);
    }
    log::debug!("SVD stalled on {a:?}; retrying on the adjoint");
    let t =
        SVD::try_new(a.adjoint(), compute_v, compute_u, f64::EPSILON, cap).ok_or(LinalgError::NoConvergence("SVD"))?;
    Ok(SVD {
        u: t.v_t.map(|m| m.adjoint()),
        v_t: t.u.map(|m| m.adjoint()),
        singular_values: t.singular_values,
    })
}

/// Eigenvalues of a Hermitian matrix, unsorted.
pub fn hermitian_spectrum(m: &CMatrix) -> Result<Vec<f64>, LinalgError> {
    let n = ensure_square(m)?;
    let cap = MAX_SWEEPS * n.max(1);
    if let Some(e) = SymmetricEigen::try_new(m.clone(), f64::EPSILON, cap) {
        return Ok(e.eigenvalues.iter().copied().collect());
    }
    log::debug!("Hermitian eigensolver stalled on {m:?}; retrying in a rotated basis");
    let q = reflector(n);
    let rotated = &q * m * q.adjoint();
    let rotated = (&rotated + rotated.adjoint()).scale(0.5);
    SymmetricEigen::try_new(rotated, f64::EPSILON, cap)
        .map(|e| e.eigenvalues.iter().copied().collect())
        .ok_or(LinalgError::NoConvergence("Hermitian eigensolver"))
}

pub fn fro_norm(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn ensure_square(m: &CMatrix) -> Result<usize, LinalgError> {
    if m.is_square() {
        Ok(m.nrows())
    } else {
        Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        })
    }
}

/// Eigenvalues read off the diagonal of the complex Schur form.
pub fn eigenvalues(a: &CMatrix) -> Result<Vec<Complex64>, LinalgError> {
    let n = ensure_square(a)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let (_, t) = schur(a)?;
    Ok((0..n).map(|i| t[(i, i)]).collect())
}

/// Largest real part of the spectrum; `-inf` for an empty matrix.
pub fn spectral_abscissa(a: &CMatrix) -> Result<f64, LinalgError> {
    Ok(eigenvalues(a)?.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

pub fn inverse(m: &CMatrix) -> Result<CMatrix, LinalgError> {
    ensure_square(m)?;
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    m.clone().try_inverse().ok_or(LinalgError::Singular)
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn lstsq(a: &CMatrix, b: &CMatrix) -> Result<CMatrix, LinalgError> {
    if a.nrows() != b.nrows() {
        return Err(LinalgError::Dimension(format!(
            "lstsq: a has {} rows, b has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let svd = svd(a, true, true)?;
    let eps = f64::EPSILON * a.nrows().max(a.ncols()) as f64 * svd.singular_values.max();
    svd.solve(b, eps).map_err(|e| LinalgError::Dimension(e.to_string()))
}

/// Numerical rank from singular values, relative threshold `rtol`.
pub fn rank(a: &CMatrix, rtol: f64) -> Result<usize, LinalgError> {
    if a.is_empty() {
        return Ok(0);
    }
    let sv = svd(a, false, false)?.singular_values;
    let top = sv.max();
    Ok(sv.iter().filter(|&&s| s > rtol * top.max(f64::MIN_POSITIVE)).count())
}

/// Solve `A X + X A† + Q = 0` by Bartels-Stewart on the complex Schur form
/// of `A`. Requires `λi + conj(λj) ≠ 0` for all eigenvalue pairs; `A` need
/// not be stable. A Hermitian `Q` yields a Hermitian `X`.
pub fn solve_lyapunov_general(a: &CMatrix, q: &CMatrix) -> Result<CMatrix, LinalgError> {
    let n = ensure_square(a)?;
    if q.shape() != (n, n) {
        return Err(LinalgError::Dimension(format!(
            "Q is {:?}, expected {n}x{n}",
            q.shape()
        )));
    }
    if n == 0 {
        return Ok(q.clone());
    }
    let (u, t) = schur(a)?;

    let scale = max_abs(&t).max(1.0);
    let mut gap = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            gap = gap.min((t[(i, i)] + t[(j, j)].conj()).norm());
        }
    }
    if gap < 1e-12 * scale {
        return Err(LinalgError::SingularLyapunov { gap });
    }

    // T Y + Y T† = W with W = -U† Q U, solved column by column from the right.
    let w = -(u.adjoint() * q * &u);
    let mut y = CMatrix::zeros(n, n);
    for j in (0..n).rev() {
        let mut rhs = w.column(j).into_owned();
        for k in (j + 1)..n {
            let coeff = t[(j, k)].conj();
            rhs -= y.column(k) * coeff;
        }
        let mut shifted = t.clone();
        let shift = t[(j, j)].conj();
        for i in 0..n {
            shifted[(i, i)] += shift;
        }
        let col = shifted.solve_upper_triangular(&rhs).ok_or(LinalgError::Singular)?;
        y.set_column(j, &col);
    }
    let x = &u * y * u.adjoint();
    if is_hermitian_input(q) {
        Ok(hermitian_part(&x))
    } else {
        Ok(x)
    }
}

fn is_hermitian_input(q: &CMatrix) -> bool {
    max_abs(&(q - q.adjoint())) <= 1e-14 * max_abs(q).max(1.0)
}

/// Residual `max |A X + X A† + Q|`.
pub fn lyapunov_residual(a: &CMatrix, x: &CMatrix, q: &CMatrix) -> f64 {
    max_abs(&(a * x + x * a.adjoint() + q))
}
