//! Small shared numeric helpers.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Replaces `m` with its exactly symmetric part `(m + m') / 2`.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Errors unless `m` is square and symmetric within absolute tolerance `tol`.
pub(crate) fn check_symmetric(name: &str, m: &DMatrix<f64>, tol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::dims(
            name,
            "a square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "{name} is asymmetric at ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn check_finite(name: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// `log |A|` for the matrix factored by `chol`.
pub(crate) fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `trace(A B)` for symmetric `A` and `B` of equal size.
pub(crate) fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Cholesky that reports which matrix failed instead of returning `None`.
pub(crate) fn cholesky(name: &str, m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::NotSpd(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    #[test]
    fn symmetrize_averages_off_diagonal() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 3.0]);
        symmetrize(&mut m);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 3.0]));
        assert!(check_symmetric("m", &m, 0.0).is_ok());
    }

    #[test]
    fn log_det_matches_direct_determinant() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let chol = cholesky("m", m.clone()).unwrap();
        assert_abs_diff_eq!(log_det(&chol), m.determinant().ln(), epsilon = 1e-12);
    }

    #[test]
    fn trace_prod_matches_explicit_product() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]);
        let b = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, -1.0, 2.0]);
        assert_abs_diff_eq!(trace_prod(&a, &b), (&a * &b).trace(), epsilon = 1e-12);
    }

    #[test]
    fn cholesky_distinguishes_spd_from_indefinite() {
        assert!(cholesky("ok", DMatrix::identity(3, 3)).is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky("bad", bad), Err(Error::NotSpd(_))));
    }
}
