//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Replace `m` by `(m + mᵀ)/2` in place.
pub fn symmetrize(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(mut m: Mat) -> Mat {
    symmetrize(&mut m);
    m
}

/// Largest absolute entry.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let sym = symmetrized(m.clone());
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

fn asymmetry(m: &Mat) -> f64 {
    max_abs(&(m - m.transpose()))
}

/// PSD test with the round-off threshold `-1e-10·(1+‖m‖)`.
pub fn is_psd(m: &Mat) -> bool {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = 1.0 + m.norm();
    if asymmetry(m) > 1e-10 * scale {
        return false;
    }
    sym_eigenvalues(m).first().is_none_or(|&lo| lo >= -1e-10 * scale)
}

/// Strict positive definiteness: symmetric and smallest eigenvalue > 0.
pub fn is_pd(m: &Mat) -> bool {
    if !m.is_square() || m.nrows() == 0 || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = 1.0 + m.norm();
    if asymmetry(m) > 1e-10 * scale {
        return false;
    }
    sym_eigenvalues(m).first().is_some_and(|&lo| lo > 0.0)
}

pub fn check_psd(m: &Mat, name: &'static str) -> Result<()> {
    if is_psd(m) {
        Ok(())
    } else {
        Err(Error::NotPsd(name))
    }
}

pub fn check_pd(m: &Mat, name: &'static str) -> Result<()> {
    if is_pd(m) {
        Ok(())
    } else {
        Err(Error::NotPositiveDefinite(name))
    }
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
///
/// Fails with `SingularTilt` when the spectral condition number exceeds `1e12`.
pub fn spd_inverse_logdet(m: &Mat) -> Result<(Mat, f64)> {
    let ev = sym_eigenvalues(m);
    let (lo, hi) = match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Ok((Mat::zeros(0, 0), 0.0)),
    };
    if !(lo > 0.0) || hi / lo > 1e12 {
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(Error::SingularTilt { condition });
    }
    let chol = symmetrized(m.clone())
        .cholesky()
        .ok_or(Error::SingularTilt { condition: hi / lo })?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((symmetrized(chol.inverse()), logdet))
}

/// `log Σ exp(v_i)` over the finite entries; `-inf` when none are finite.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().filter(|v| v.is_finite()).map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Trapezoid weights for nodes `xs` (need not be uniform).
pub fn trapezoid_weights(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = xs[i + 1] - xs[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

pub fn scalar(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_detects_indefinite() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!is_psd(&m));
        assert!(is_psd(&Mat::identity(3, 3)));
        assert!(is_psd(&Mat::zeros(2, 2)));
        assert!(!is_pd(&Mat::zeros(2, 2)));
    }

    #[test]
    fn logsumexp_handles_extremes() {
        let v = [-1000.0, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn spd_inverse_matches() {
        let m = Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let (inv, logdet) = spd_inverse_logdet(&m).unwrap();
        assert!(((&m * &inv) - Mat::identity(2, 2)).norm() < 1e-12);
        assert!((logdet - 11f64.ln()).abs() < 1e-12);
        let bad = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        assert!(matches!(spd_inverse_logdet(&bad), Err(Error::SingularTilt { .. })));
    }
}
