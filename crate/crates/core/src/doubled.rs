//! Doubled-up complex matrix algebra.
//!
//! Linear quantum systems are written in terms of the doubled vector
//! `[a; a#]`, and every system matrix then has the block form
//!
//! ```text
//! Δ(A1, A2) = [ A1   A2  ]
//!             [ A2#  A1# ]
//! ```
//!
//! where `#` is entrywise complex conjugation. This module provides that
//! embedding, structural predicates, the signature matrix `diag(I, -I)` and
//! the permutations between per-channel doubling (`[a1; a1#; a2; a2#]`) and
//! global doubling (`[a1; a2; a1#; a2#]`).

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

pub type CMatrix = DMatrix<Complex64>;

/// Default absolute per-entry tolerance for structural checks.
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgebraError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("matrix of shape {rows}x{cols} has an odd dimension")]
    OddDimension { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (max defect {defect:.3e})")]
    NotHermitian { defect: f64 },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix contains a non-finite entry")]
    NonFinite,
    #[error("channel widths sum to {sum}, matrix dimension is {dim}")]
    WidthMismatch { sum: usize, dim: usize },
    #[error("eigensolver did not converge")]
    NoConvergence,
}

#[inline]
pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[inline]
pub fn re(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn zeros(rows: usize, cols: usize) -> CMatrix {
    CMatrix::zeros(rows, cols)
}

/// Lift a real matrix to a complex one.
pub fn complexify(m: &DMatrix<f64>) -> CMatrix {
    m.map(re)
}

pub fn ensure_finite(m: &CMatrix) -> Result<(), AlgebraError> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(AlgebraError::NonFinite)
    }
}

/// Largest entry modulus; zero for an empty matrix.
pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Conjugate transpose.
pub fn adjoint(m: &CMatrix) -> CMatrix {
    m.adjoint()
}

/// `max |m - m†|`.
pub fn hermitian_defect(m: &CMatrix) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    max_abs(&(m - m.adjoint()))
}

/// `(m + m†) / 2`.
pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).scale(0.5)
}

/// A matrix stored through its two Δ blocks.
///
/// The full `2p x 2q` matrix is materialized on demand, so the Δ structure
/// holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubledMatrix {
    block1: CMatrix,
    block2: CMatrix,
}

impl DoubledMatrix {
    pub fn new(block1: CMatrix, block2: CMatrix) -> Result<Self, AlgebraError> {
        if block1.shape() != block2.shape() {
            return Err(AlgebraError::ShapeMismatch {
                expected: block1.shape(),
                found: block2.shape(),
            });
        }
        ensure_finite(&block1)?;
        ensure_finite(&block2)?;
        Ok(Self { block1, block2 })
    }

    /// `Δ(a1, 0)` for a real scalar multiple of the identity.
    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Self {
            block1: identity(n).scale(s),
            block2: zeros(n, n),
        }
    }

    /// Split a Δ-structured matrix into its blocks, checking the structure.
    pub fn from_full(m: &CMatrix, tol: f64) -> Result<Option<Self>, AlgebraError> {
        if !is_delta_structured(m, tol)? {
            return Ok(None);
        }
        let (p, q) = (m.nrows() / 2, m.ncols() / 2);
        Ok(Some(Self {
            block1: m.view((0, 0), (p, q)).into_owned(),
            block2: m.view((0, q), (p, q)).into_owned(),
        }))
    }

    pub fn block1(&self) -> &CMatrix {
        &self.block1
    }

    pub fn block2(&self) -> &CMatrix {
        &self.block2
    }

    /// Half dimensions `(p, q)`.
    pub fn half_shape(&self) -> (usize, usize) {
        self.block1.shape()
    }

    pub fn full(&self) -> CMatrix {
        let (p, q) = self.half_shape();
        let mut out = zeros(2 * p, 2 * q);
        out.view_mut((0, 0), (p, q)).copy_from(&self.block1);
        out.view_mut((0, q), (p, q)).copy_from(&self.block2);
        out.view_mut((p, 0), (p, q)).copy_from(&self.block2.map(|z| z.conj()));
        out.view_mut((p, q), (p, q)).copy_from(&self.block1.map(|z| z.conj()));
        out
    }

    /// `Δ(A1, A2)† = Δ(A1†, A2ᵀ)`.
    pub fn adjoint(&self) -> Self {
        Self {
            block1: self.block1.adjoint(),
            block2: self.block2.transpose(),
        }
    }

    /// `Δ(A1, A2) Δ(B1, B2) = Δ(A1 B1 + A2 B2#, A1 B2 + A2 B1#)`.
    pub fn mul(&self, rhs: &Self) -> Result<Self, AlgebraError> {
        let (_, q) = self.half_shape();
        let (p2, _) = rhs.half_shape();
        if q != p2 {
            return Err(AlgebraError::ShapeMismatch {
                expected: (q, rhs.half_shape().1),
                found: rhs.half_shape(),
            });
        }
        let b1c = rhs.block1.map(|z| z.conj());
        let b2c = rhs.block2.map(|z| z.conj());
        Ok(Self {
            block1: &self.block1 * &rhs.block1 + &self.block2 * b2c,
            block2: &self.block1 * &rhs.block2 + &self.block2 * b1c,
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, AlgebraError> {
        if self.half_shape() != rhs.half_shape() {
            return Err(AlgebraError::ShapeMismatch {
                expected: self.half_shape(),
                found: rhs.half_shape(),
            });
        }
        Ok(Self {
            block1: &self.block1 + &rhs.block1,
            block2: &self.block2 + &rhs.block2,
        })
    }
}

/// `Δ(a1, a2)`.
pub fn delta_embed(a1: CMatrix, a2: CMatrix) -> Result<DoubledMatrix, AlgebraError> {
    DoubledMatrix::new(a1, a2)
}

/// True iff the lower blocks are the conjugates of the upper blocks within
/// `tol`, entry by entry.
pub fn is_delta_structured(m: &CMatrix, tol: f64) -> Result<bool, AlgebraError> {
    let (rows, cols) = m.shape();
    if rows % 2 != 0 || cols % 2 != 0 {
        return Err(AlgebraError::OddDimension { rows, cols });
    }
    let (p, q) = (rows / 2, cols / 2);
    for i in 0..p {
        for j in 0..q {
            let upper_left = m[(i, j)];
            let upper_right = m[(i, j + q)];
            if (m[(i + p, j)] - upper_right.conj()).norm() > tol || (m[(i + p, j + q)] - upper_left.conj()).norm() > tol
            {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// `diag(I_n, -I_n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignatureMatrix {
    half_dim: usize,
}

impl SignatureMatrix {
    pub fn new(half_dim: usize) -> Self {
        Self { half_dim }
    }

    pub fn half_dim(&self) -> usize {
        self.half_dim
    }

    pub fn full(&self) -> CMatrix {
        let n = self.half_dim;
        CMatrix::from_fn(2 * n, 2 * n, |i, j| {
            if i != j {
                re(0.0)
            } else if i < n {
                re(1.0)
            } else {
                re(-1.0)
            }
        })
    }
}

/// Eigenvalue sign counts of a Hermitian matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub positive: usize,
    pub zero: usize,
    pub negative: usize,
}

impl Inertia {
    pub fn new(positive: usize, zero: usize, negative: usize) -> Self {
        Self {
            positive,
            zero,
            negative,
        }
    }
}

/// Real eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMatrix, tol: f64) -> Result<Vec<f64>, AlgebraError> {
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(AlgebraError::NotSquare { rows, cols });
    }
    let defect = hermitian_defect(m);
    if defect > tol {
        return Err(AlgebraError::NotHermitian { defect });
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    let mut values = crate::linalg::hermitian_spectrum(&hermitian_part(m)).map_err(|_| AlgebraError::NoConvergence)?;
    values.sort_by(|a, b| a.total_cmp(b));
    Ok(values)
}

/// Eigenvalue sign counts, with `|λ| < tol` counted as zero.
pub fn inertia(m: &CMatrix, tol: f64) -> Result<Inertia, AlgebraError> {
    let values = hermitian_eigenvalues(m, tol)?;
    let mut out = Inertia::new(0, 0, 0);
    for v in values {
        if v.abs() < tol {
            out.zero += 1;
        } else if v > 0.0 {
            out.positive += 1;
        } else {
            out.negative += 1;
        }
    }
    Ok(out)
}

/// Permutation taking per-block doubled order to global doubled order.
///
/// For block widths `[w1, w2, ..]` the per-block order is
/// `[x1 (w1), x1# (w1), x2 (w2), x2# (w2), ..]` and the global order is
/// `[x1, x2, .., x1#, x2#, ..]`. Entry `g` of the result is the per-block
/// index of global index `g`.
pub fn blocked_to_global(widths: &[usize]) -> Vec<usize> {
    let total: usize = widths.iter().sum();
    let mut perm = vec![0; 2 * total];
    let mut global = 0;
    let mut blocked = 0;
    for &w in widths {
        for k in 0..w {
            perm[global + k] = blocked + k;
            perm[total + global + k] = blocked + w + k;
        }
        global += w;
        blocked += 2 * w;
    }
    perm
}

/// Rows of `m` reordered from per-block doubled to global doubled order.
pub fn rows_to_global(m: &CMatrix, widths: &[usize]) -> Result<CMatrix, AlgebraError> {
    let perm = checked_perm(m.nrows(), widths)?;
    Ok(CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], j)]))
}

/// Columns of `m` reordered from per-block doubled to global doubled order.
pub fn cols_to_global(m: &CMatrix, widths: &[usize]) -> Result<CMatrix, AlgebraError> {
    let perm = checked_perm(m.ncols(), widths)?;
    Ok(CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, perm[j])]))
}

/// Inverse of [`rows_to_global`].
pub fn rows_from_global(m: &CMatrix, widths: &[usize]) -> Result<CMatrix, AlgebraError> {
    let perm = checked_perm(m.nrows(), widths)?;
    let mut out = zeros(m.nrows(), m.ncols());
    for (g, &b) in perm.iter().enumerate() {
        out.set_row(b, &m.row(g));
    }
    Ok(out)
}

/// Inverse of [`cols_to_global`].
pub fn cols_from_global(m: &CMatrix, widths: &[usize]) -> Result<CMatrix, AlgebraError> {
    let perm = checked_perm(m.ncols(), widths)?;
    let mut out = zeros(m.nrows(), m.ncols());
    for (g, &b) in perm.iter().enumerate() {
        out.set_column(b, &m.column(g));
    }
    Ok(out)
}

fn checked_perm(dim: usize, widths: &[usize]) -> Result<Vec<usize>, AlgebraError> {
    let sum: usize = widths.iter().sum();
    if 2 * sum != dim {
        return Err(AlgebraError::WidthMismatch { sum, dim });
    }
    Ok(blocked_to_global(widths))
}

/// Horizontal concatenation; all parts must share a row count.
pub fn hstack(rows: usize, parts: &[&CMatrix]) -> Result<CMatrix, AlgebraError> {
    let cols = parts.iter().map(|p| p.ncols()).sum();
    let mut out = zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        if p.nrows() != rows {
            return Err(AlgebraError::ShapeMismatch {
                expected: (rows, p.ncols()),
                found: p.shape(),
            });
        }
        out.view_mut((0, at), p.shape()).copy_from(*p);
        at += p.ncols();
    }
    Ok(out)
}

/// Vertical concatenation; all parts must share a column count.
pub fn vstack(cols: usize, parts: &[&CMatrix]) -> Result<CMatrix, AlgebraError> {
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let mut out = zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        if p.ncols() != cols {
            return Err(AlgebraError::ShapeMismatch {
                expected: (p.nrows(), cols),
                found: p.shape(),
            });
        }
        out.view_mut((at, 0), p.shape()).copy_from(*p);
        at += p.nrows();
    }
    Ok(out)
}

/// `[[a, b], [c, d]]` with conforming blocks.
pub fn block2x2(a: &CMatrix, b: &CMatrix, c: &CMatrix, d: &CMatrix) -> Result<CMatrix, AlgebraError> {
    let top = hstack(a.nrows(), &[a, b])?;
    let bottom = hstack(c.nrows(), &[c, d])?;
    vstack(top.ncols(), &[&top, &bottom])
}

/// JSON matrix literals: an array of rows, each entry a `[re, im]` pair.
///
/// Plain numbers are accepted on input as real entries; output always uses
/// pairs.
pub mod literal {
    use super::{c, CMatrix};
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Entry {
        Pair([f64; 2]),
        Real(f64),
    }

    pub fn to_rows(m: &CMatrix) -> Vec<Vec<[f64; 2]>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
            .collect()
    }

    pub fn serialize<S: Serializer>(m: &CMatrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CMatrix, D::Error> {
        let rows: Vec<Vec<Entry>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix literal"));
        }
        let mut data = Vec::with_capacity(nrows * ncols);
        for row in rows {
            for e in row {
                let z = match e {
                    Entry::Pair([x, y]) => c(x, y),
                    Entry::Real(x) => c(x, 0.0),
                };
                if !(z.re.is_finite() && z.im.is_finite()) {
                    return Err(D::Error::custom("non-finite matrix entry"));
                }
                data.push(z);
            }
        }
        Ok(CMatrix::from_row_slice(nrows, ncols, &data))
    }

    pub mod option {
        use super::CMatrix;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(m: &Option<CMatrix>, s: S) -> Result<S::Ok, S::Error> {
            match m {
                Some(m) => super::serialize(m, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<CMatrix>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(with = "super")] CMatrix);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}
