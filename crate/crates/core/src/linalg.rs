//! Dense kernels shared by the estimator, the subspace code and the solvers.
//!
//! Matrices are `nalgebra` types throughout the public API. The heavy
//! decompositions (thin SVD, symmetric eigen) are delegated to `faer`, which is
//! several times faster on the tall `t x m` matrices the recovery solvers
//! factor every iteration. `faer` runs sequentially so results are
//! reproducible bit-for-bit on one platform.

use std::sync::Once;

use faer::MatRef;
use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

static SEQUENTIAL: Once = Once::new();

fn ensure_sequential() {
    SEQUENTIAL.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

fn as_faer(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn from_faer(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Thin singular value decomposition `M = U diag(s) Vᵀ`.
///
/// `u` is `rows x k`, `v` is `cols x k` with `k = min(rows, cols)`; singular
/// values are non-increasing.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, sj) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(*sj);
        }
        us * self.v.transpose()
    }
}

pub fn thin_svd(m: &DMatrix<f64>) -> Result<Svd> {
    ensure_sequential();
    if m.is_empty() {
        return Err(Error::contract("SVD of an empty matrix"));
    }
    let svd = as_faer(m).thin_svd().map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let s = svd.S().column_vector();
    Ok(Svd { u: from_faer(svd.U()), s: DVector::from_iterator(s.nrows(), s.iter().copied()), v: from_faer(svd.V()) })
}

pub fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    ensure_sequential();
    if m.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let mut s = as_faer(m).singular_values().map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(DVector::from_vec(s))
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.iter().copied().fold(0.0, f64::max))
}

/// Numerical rank with the usual `max(rows, cols) * eps * s_max` cutoff.
pub fn rank(m: &DMatrix<f64>) -> Result<usize> {
    let s = singular_values(m)?;
    let smax = s.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    let cutoff = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax;
    Ok(s.iter().filter(|&&v| v > cutoff).count())
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in descending order.
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    ensure_sequential();
    if !m.is_square() {
        return Err(Error::contract("eigen-decomposition needs a square matrix"));
    }
    let evd = as_faer(m)
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigen-decomposition failed: {e:?}")))?;
    let vals = evd.S().column_vector();
    let vecs = evd.U();
    let n = m.nrows();
    // faer returns ascending order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| vals[k]));
    let vectors = DMatrix::from_fn(n, n, |i, j| vecs[(i, order[j])]);
    Ok((values, vectors))
}

/// Leading singular triplets (`s > floor`) from the eigen-decomposition of the
/// Gram matrix of the shorter side.
///
/// Squaring costs accuracy: a triplet with value `s` carries an absolute error
/// of roughly `eps * s_max^2 / s`. Callers only use this for triplets well
/// above `sqrt(eps) * s_max`, where it agrees with [`thin_svd`] to ~1e-10.
/// Also returns `s_max`, which is accurate to machine precision.
pub fn leading_svd(m: &DMatrix<f64>, floor: f64) -> Result<(Svd, f64)> {
    ensure_sequential();
    if m.is_empty() {
        return Err(Error::contract("SVD of an empty matrix"));
    }
    let wide = m.nrows() < m.ncols();
    let a = as_faer(m);
    let gram = if wide { a * a.transpose() } else { a.transpose() * a };
    let evd = gram
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigen-decomposition failed: {e:?}")))?;
    let vals = evd.S().column_vector();
    let vecs = evd.U();
    let k = vals.nrows();
    let smax = vals[k - 1].max(0.0).sqrt();
    // Ascending from faer; walk down from the top.
    let keep: Vec<usize> = (0..k).rev().take_while(|&j| vals[j] > 0.0 && vals[j].sqrt() > floor).collect();
    let s = DVector::from_iterator(keep.len(), keep.iter().map(|&j| vals[j].sqrt()));
    let side = DMatrix::from_fn(k, keep.len(), |i, c| vecs[(i, keep[c])]);
    // Other side: columns of M side / s (or M^T side / s).
    let mut other = if wide { m.tr_mul(&side) } else { m * &side };
    for (j, sj) in s.iter().enumerate() {
        other.column_mut(j).unscale_mut(*sj);
    }
    let svd = if wide { Svd { u: side, s, v: other } } else { Svd { u: other, s, v: side } };
    Ok((svd, smax))
}

/// Largest singular value via the Gram matrix. Relative accuracy is that of
/// the top Gram eigenvalue, i.e. machine precision.
pub fn spectral_norm_gram(m: &DMatrix<f64>) -> Result<f64> {
    ensure_sequential();
    if m.is_empty() {
        return Ok(0.0);
    }
    let a = as_faer(m);
    let gram = if m.nrows() < m.ncols() { a * a.transpose() } else { a.transpose() * a };
    let vals = gram
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigenvalues failed: {e:?}")))?;
    Ok(vals.iter().copied().fold(0.0, f64::max).sqrt())
}

/// Sum of absolute entries.
pub fn l1_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Flip each column so its largest-magnitude entry is positive.
pub fn canonical_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0.0_f64;
        for v in col.iter() {
            if v.abs() > best.abs() {
                best = *v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

/// Orthonormal basis of the column space via thin QR. Assumes full column rank.
pub fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().qr().q()
}

/// Principal angles (radians, ascending) between the column spaces of two
/// matrices with orthonormal columns.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::contract("principal angles need equal row counts"));
    }
    let s = singular_values(&(a.transpose() * b))?;
    let mut angles: Vec<f64> = s.iter().map(|c| c.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}
