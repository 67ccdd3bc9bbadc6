//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{linalg::Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest absolute entry, 0 for an empty matrix.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_asymmetry(m: &Mat) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn identity(d: usize) -> Mat {
    Mat::identity(d, d)
}

/// Cholesky of the symmetrized matrix, retrying with diagonal jitter
/// `rel_jitter * 10^k * trace/d` for `k = 0..attempts` when the plain
/// factorization fails.
pub fn cholesky_with_jitter(
    m: &Mat,
    rel_jitter: f64,
    attempts: usize,
) -> std::result::Result<Cholesky<f64, Dyn>, Error> {
    let sym = symmetrize(m);
    if let Some(ch) = Cholesky::new(sym.clone()) {
        return Ok(ch);
    }
    let d = sym.nrows().max(1) as f64;
    let scale = (sym.trace() / d).abs();
    let mut jitter = rel_jitter * scale;
    for _ in 0..attempts {
        if jitter > 0.0 {
            let mut shifted = sym.clone();
            for i in 0..shifted.nrows() {
                shifted[(i, i)] += jitter;
            }
            if let Some(ch) = Cholesky::new(shifted) {
                return Ok(ch);
            }
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization { attempts })
}

pub(crate) const INVERSE_JITTER: f64 = 1e-10;
pub(crate) const INVERSE_ATTEMPTS: usize = 3;

pub fn spd_inverse(m: &Mat, context: &'static str) -> Result<Mat> {
    cholesky_with_jitter(m, INVERSE_JITTER, INVERSE_ATTEMPTS)
        .map(|ch| ch.inverse())
        .map_err(|_| Error::Singular { context })
}

pub fn spd_solve(m: &Mat, rhs: &Vector, context: &'static str) -> Result<Vector> {
    cholesky_with_jitter(m, INVERSE_JITTER, INVERSE_ATTEMPTS)
        .map(|ch| ch.solve(rhs))
        .map_err(|_| Error::Singular { context })
}

pub fn check_square(m: &Mat, d: usize, context: &'static str) -> Result<()> {
    if m.nrows() != d {
        return Err(Error::DimensionMismatch {
            context,
            expected: d,
            got: m.nrows(),
        });
    }
    if m.ncols() != d {
        return Err(Error::DimensionMismatch {
            context,
            expected: d,
            got: m.ncols(),
        });
    }
    Ok(())
}

pub fn check_len(v: &Vector, d: usize, context: &'static str) -> Result<()> {
    if v.len() != d {
        return Err(Error::DimensionMismatch {
            context,
            expected: d,
            got: v.len(),
        });
    }
    Ok(())
}

/// `Tr(X Y)` without forming the product.
pub fn trace_of_product(x: &Mat, y: &Mat) -> f64 {
    let n = x.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..x.ncols() {
            acc += x[(i, k)] * y[(k, i)];
        }
    }
    acc
}
