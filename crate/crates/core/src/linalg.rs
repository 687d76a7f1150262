//! Small dense linear algebra on [`Tensor`] matrices: Cholesky solves, the
//! matrix exponential, spectra and PBH rank tests.
//!
//! Solves and the exponential are generic over the scalar. Eigenvalue work
//! is delegated to nalgebra in `f64`; it is diagnostic (stability and
//! well-posedness checks), never on a hot path.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix exponential series did not converge within {terms} terms")]
    SeriesDiverged { terms: usize },
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

fn square<T: Scalar>(m: &Tensor<T>, op: &'static str) -> Result<usize, ShapeError> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return Err(ShapeError::Invalid {
            op,
            detail: format!("expected a square matrix, got {:?}", m.shape()),
        });
    }
    Ok(m.rows())
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>, LinalgError> {
    let n = square(m, "cholesky")?;
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = m.at(j, j);
        for k in 0..j {
            d -= l.at(j, k) * l.at(j, k);
        }
        if !(d > T::zero()) {
            return Err(LinalgError::NotPositiveDefinite {
                pivot: j,
                value: d.as_f64(),
            });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = m.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` given the Cholesky factor `L`.
pub fn cholesky_solve<T: Scalar>(l: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    let n = square(l, "cholesky_solve")?;
    if b.rank() != 2 || b.rows() != n {
        return Err(ShapeError::Mismatch {
            op: "cholesky_solve",
            left: l.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let m = b.cols();
    let mut x = b.clone();
    for c in 0..m {
        // forward: L y = b
        for i in 0..n {
            let mut s = x.at(i, c);
            for k in 0..i {
                s -= l.at(i, k) * x.at(k, c);
            }
            x.set(i, c, s / l.at(i, i));
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x.at(i, c);
            for k in i + 1..n {
                s -= l.at(k, i) * x.at(k, c);
            }
            x.set(i, c, s / l.at(i, i));
        }
    }
    Ok(x)
}

/// `exp(M)` by scaling and squaring around a truncated Taylor series.
///
/// The series is summed until a term drops below `tol` relative to the
/// partial sum (in Frobenius norm).
pub fn expm<T: Scalar>(m: &Tensor<T>, tol: T) -> Result<Tensor<T>, LinalgError> {
    const MAX_TERMS: usize = 60;
    let n = square(m, "expm")?;
    if !m.is_finite() {
        return Err(LinalgError::NonFinite("expm input"));
    }
    let norm = m.frobenius_norm();
    let mut squarings = 0u32;
    let half = T::lit(0.5);
    let mut scaled_norm = norm;
    while scaled_norm > half {
        scaled_norm *= half;
        squarings += 1;
    }
    let scaled = m.scale(T::lit(0.5f64.powi(squarings as i32)));

    let mut sum = Tensor::identity(n);
    let mut term = Tensor::identity(n);
    let mut converged = false;
    for k in 1..=MAX_TERMS {
        term = term.matmul(&scaled)?.scale(T::one() / T::from_usize(k).unwrap());
        sum.add_assign(&term)?;
        if term.frobenius_norm() <= tol * sum.frobenius_norm() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::SeriesDiverged { terms: MAX_TERMS });
    }
    for _ in 0..squarings {
        sum = sum.matmul(&sum)?;
    }
    if !sum.is_finite() {
        return Err(LinalgError::NonFinite("expm result"));
    }
    Ok(sum)
}

pub(crate) fn to_dmatrix<T: Scalar>(m: &Tensor<T>) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m.at(i, j).as_f64())
}

/// Eigenvalues of a general real square matrix.
pub fn eigenvalues<T: Scalar>(m: &Tensor<T>) -> Result<Vec<Complex64>, ShapeError> {
    square(m, "eigenvalues")?;
    Ok(to_dmatrix(m).complex_eigenvalues().iter().copied().collect())
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius<T: Scalar>(m: &Tensor<T>) -> Result<f64, ShapeError> {
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

pub fn max_asymmetry<T: Scalar>(m: &Tensor<T>) -> Result<f64, ShapeError> {
    let n = square(m, "max_asymmetry")?;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((m.at(i, j) - m.at(j, i)).abs().as_f64());
        }
    }
    Ok(worst)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue<T: Scalar>(m: &Tensor<T>) -> Result<f64, ShapeError> {
    let sym = m.symmetrized()?;
    let eig = to_dmatrix(&sym).symmetric_eigenvalues();
    Ok(eig.iter().copied().fold(f64::INFINITY, f64::min))
}

fn complex_rank(m: &DMatrix<Complex64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let largest = sv.iter().copied().fold(0.0, f64::max);
    if largest == 0.0 {
        return 0;
    }
    let tol = largest * 1e-9 * (m.nrows().max(m.ncols()) as f64);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Eigenvalues of `a` on or outside the unit circle (within `margin`).
fn unstable_modes(a: &DMatrix<f64>, margin: f64) -> Vec<Complex64> {
    a.complex_eigenvalues()
        .iter()
        .copied()
        .filter(|z| z.norm() >= 1.0 - margin)
        .collect()
}

/// PBH test: `rank [A − λI, B] = n` for every eigenvalue `λ` of `A` with
/// `|λ| ≥ 1`.
pub fn is_stabilizable<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<bool, ShapeError> {
    let n = square(a, "is_stabilizable")?;
    if b.rank() != 2 || b.rows() != n {
        return Err(ShapeError::Mismatch {
            op: "is_stabilizable",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let am = to_dmatrix(a);
    let bm = to_dmatrix(b);
    let m = b.cols();
    for lambda in unstable_modes(&am, 1e-9) {
        let pbh = DMatrix::from_fn(n, n + m, |i, j| {
            if j < n {
                Complex64::new(am[(i, j)], 0.0) - if i == j { lambda } else { Complex64::new(0.0, 0.0) }
            } else {
                Complex64::new(bm[(i, j - n)], 0.0)
            }
        });
        if complex_rank(&pbh) < n {
            return Ok(false);
        }
    }
    Ok(true)
}

/// PBH test for detectability of `(C, A)`: `rank [A − λI; C] = n` for every
/// eigenvalue with `|λ| ≥ 1`. For `C = Q^{1/2}` it suffices to pass `Q`,
/// since both have the same null space.
pub fn is_detectable<T: Scalar>(c: &Tensor<T>, a: &Tensor<T>) -> Result<bool, ShapeError> {
    let n = square(a, "is_detectable")?;
    if c.rank() != 2 || c.cols() != n {
        return Err(ShapeError::Mismatch {
            op: "is_detectable",
            left: c.shape().to_vec(),
            right: a.shape().to_vec(),
        });
    }
    let am = to_dmatrix(a);
    let cm = to_dmatrix(c);
    let p = c.rows();
    for lambda in unstable_modes(&am, 1e-9) {
        let pbh = DMatrix::from_fn(n + p, n, |i, j| {
            if i < n {
                Complex64::new(am[(i, j)], 0.0) - if i == j { lambda } else { Complex64::new(0.0, 0.0) }
            } else {
                Complex64::new(cm[(i - n, j)], 0.0)
            }
        });
        if complex_rank(&pbh) < n {
            return Ok(false);
        }
    }
    Ok(true)
}
