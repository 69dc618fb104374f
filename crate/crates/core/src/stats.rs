//! Exponentially tilted moments of the initial law.
//!
//! For a tilt `exp(−½xᵀSx + xᵀρ)` the tilted law is `q₀` reweighted and
//! normalized. Its mean is b(ρ,t), its second moment B(ρ,t), and
//! `Γ = Σ + Φ(B − bbᵀ)Φᵀ` is the conditional covariance of the state.
//! Normalizers are kept in log space throughout.

use num_complex::Complex64;

use crate::density::{DensityKind, InitialDensity};
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, spd_inverse_logdet, symmetrized, trapezoid_weights, Mat, Vector};

/// Mean, second moment and log-normalizer of the tilted law.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedMoments {
    /// `log ∫ exp(−½xᵀSx + xᵀρ) q₀(x) dx`, including the mass of q₀.
    pub log_normalizer: f64,
    pub b: Vector,
    /// Second moment B (not centered).
    pub second: Mat,
    /// Covariance `B − bbᵀ`, accumulated directly to avoid cancellation.
    pub cov: Mat,
}

#[derive(Debug, Clone, PartialEq)]
enum TiltedKind {
    Components {
        weights: Vec<f64>,
        means: Vec<Vector>,
        covs: Vec<Mat>,
    },
    Grid {
        nodes: Vec<f64>,
        weights: Vec<f64>,
    },
}

/// The normalized tilted law, as Gaussian components or quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedLaw {
    log_normalizer: f64,
    kind: TiltedKind,
}

pub fn tilted_law(q0: &InitialDensity, s: &Mat, rho: &Vector) -> Result<TiltedLaw> {
    match q0.kind() {
        DensityKind::Grid1d { nodes, values } => {
            let (s, r) = (s[(0, 0)], rho[0]);
            let w = trapezoid_weights(nodes);
            let logs: Vec<f64> = nodes
                .iter()
                .zip(values)
                .zip(&w)
                .map(|((&x, &q), &wi)| {
                    if q > 0.0 {
                        (q * wi).ln() - 0.5 * s * x * x + r * x
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let lse = log_sum_exp(&logs);
            if !lse.is_finite() {
                return Err(Error::Underflow { log_value: lse });
            }
            Ok(TiltedLaw {
                log_normalizer: lse,
                kind: TiltedKind::Grid {
                    nodes: nodes.clone(),
                    weights: logs.iter().map(|l| (l - lse).exp()).collect(),
                },
            })
        }
        _ => {
            let comps = q0.components();
            let mut logw = Vec::with_capacity(comps.len());
            let mut means = Vec::with_capacity(comps.len());
            let mut covs = Vec::with_capacity(comps.len());
            for (frac, c) in comps {
                let a = c.precision() + s;
                let (a_inv, logdet_a) = spd_inverse_logdet(&a)?;
                let p_inv_m = c.precision() * c.mean();
                let h = rho + &p_inv_m;
                let mean = &a_inv * &h;
                let log_z = -0.5 * (c.log_det() + logdet_a) + 0.5 * h.dot(&mean) - 0.5 * c.mean().dot(&p_inv_m);
                logw.push(frac.ln() + log_z);
                means.push(mean);
                covs.push(a_inv);
            }
            let lse = log_sum_exp(&logw);
            if !lse.is_finite() {
                return Err(Error::Underflow { log_value: lse });
            }
            Ok(TiltedLaw {
                log_normalizer: q0.mass().ln() + lse,
                kind: TiltedKind::Components {
                    weights: logw.iter().map(|l| (l - lse).exp()).collect(),
                    means,
                    covs,
                },
            })
        }
    }
}

impl TiltedLaw {
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    /// Components (weight, mean, covariance) of a Gaussian/mixture tilted law.
    pub fn components(&self) -> Option<Vec<(f64, &Vector, &Mat)>> {
        match &self.kind {
            TiltedKind::Components { weights, means, covs } => Some(
                weights
                    .iter()
                    .zip(means)
                    .zip(covs)
                    .map(|((w, m), c)| (*w, m, c))
                    .collect(),
            ),
            TiltedKind::Grid { .. } => None,
        }
    }

    /// Quadrature nodes and normalized weights of a grid tilted law.
    pub fn grid(&self) -> Option<(&[f64], &[f64])> {
        match &self.kind {
            TiltedKind::Grid { nodes, weights } => Some((nodes, weights)),
            TiltedKind::Components { .. } => None,
        }
    }

    pub fn moments(&self) -> TiltedMoments {
        match &self.kind {
            TiltedKind::Components { weights, means, covs } => {
                let n = means[0].len();
                let mut b = Vector::zeros(n);
                for (w, m) in weights.iter().zip(means) {
                    b += m * *w;
                }
                let mut cov = Mat::zeros(n, n);
                for ((w, m), c) in weights.iter().zip(means).zip(covs) {
                    let d = m - &b;
                    cov += (c + &d * d.transpose()) * *w;
                }
                let cov = symmetrized(cov);
                let second = symmetrized(&cov + &b * b.transpose());
                TiltedMoments {
                    log_normalizer: self.log_normalizer,
                    b,
                    second,
                    cov,
                }
            }
            TiltedKind::Grid { nodes, weights } => {
                let mean: f64 = nodes.iter().zip(weights).map(|(x, w)| x * w).sum();
                let var: f64 = nodes.iter().zip(weights).map(|(x, w)| w * (x - mean).powi(2)).sum();
                TiltedMoments {
                    log_normalizer: self.log_normalizer,
                    b: Vector::from_element(1, mean),
                    second: Mat::from_element(1, 1, var + mean * mean),
                    cov: Mat::from_element(1, 1, var),
                }
            }
        }
    }

    /// Directional derivative `d/dε cov(ρ + εu)`, the third cumulant contracted with `u`.
    pub fn cov_derivative(&self, u: &Vector) -> Mat {
        match &self.kind {
            TiltedKind::Components { weights, means, covs } => {
                let n = means[0].len();
                let mut b = Vector::zeros(n);
                for (w, m) in weights.iter().zip(means) {
                    b += m * *w;
                }
                let mut out = Mat::zeros(n, n);
                for ((w, m), c) in weights.iter().zip(means).zip(covs) {
                    let d = m - &b;
                    let cu = c * u;
                    out += (c + &d * d.transpose()) * (w * d.dot(u));
                    out += (&cu * d.transpose() + &d * cu.transpose()) * *w;
                }
                symmetrized(out)
            }
            TiltedKind::Grid { nodes, weights } => {
                let mean: f64 = nodes.iter().zip(weights).map(|(x, w)| x * w).sum();
                let k3: f64 = nodes.iter().zip(weights).map(|(x, w)| w * (x - mean).powi(3)).sum();
                Mat::from_element(1, 1, k3 * u[0])
            }
        }
    }

    /// `E[exp(i ωᵀx)]` under the tilted law, i.e. the ratio of the complex-tilted
    /// normalizer (argument ρ + iω) to the real one.
    pub fn characteristic(&self, omega: &Vector) -> Complex64 {
        match &self.kind {
            TiltedKind::Components { weights, means, covs } => weights
                .iter()
                .zip(means)
                .zip(covs)
                .map(|((w, m), c)| {
                    let phase = omega.dot(m);
                    let damp = -0.5 * omega.dot(&(c * omega));
                    *w * Complex64::new(damp, phase).exp()
                })
                .sum(),
            TiltedKind::Grid { nodes, weights } => nodes
                .iter()
                .zip(weights)
                .map(|(x, w)| *w * Complex64::new(0.0, omega[0] * x).exp())
                .sum(),
        }
    }
}

pub fn tilted_moments(q0: &InitialDensity, s: &Mat, rho: &Vector) -> Result<TiltedMoments> {
    Ok(tilted_law(q0, s, rho)?.moments())
}

/// Γ(ρ,t) = Σ + Φ(B − bbᵀ)Φᵀ.
pub fn gamma_mat(q0: &InitialDensity, sigma: &Mat, phi: &Mat, s: &Mat, rho: &Vector) -> Result<Mat> {
    let tm = tilted_moments(q0, s, rho)?;
    Ok(gamma_from(&tm, sigma, phi))
}

pub(crate) fn gamma_from(tm: &TiltedMoments, sigma: &Mat, phi: &Mat) -> Mat {
    symmetrized(sigma + phi * &tm.cov * phi.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::scalar;

    fn bimodal() -> InitialDensity {
        InitialDensity::mixture_1d(&[(0.5, -1.0, 0.25), (0.5, 1.0, 0.25)]).unwrap()
    }

    #[test]
    fn gaussian_closed_form() {
        let q = InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap();
        for (s, r) in [(0.0, 0.3), (0.7, -1.2), (2.0, 4.0)] {
            let tm = tilted_moments(&q, &scalar(s), &Vector::from_element(1, r)).unwrap();
            assert!((tm.b[0] - r / (s + 1.0)).abs() < 1e-14);
            assert!((tm.cov[(0, 0)] - 1.0 / (s + 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_tilt_gives_moments() {
        let q = InitialDensity::mixture_1d(&[(0.3, -0.5, 0.4), (1.1, 2.0, 0.3)]).unwrap();
        let tm = tilted_moments(&q, &scalar(0.0), &Vector::zeros(1)).unwrap();
        let m = q.moments().unwrap();
        assert!((tm.b[0] - m.mean[0]).abs() < 1e-14);
        assert!((tm.second[(0, 0)] - m.second_moment[(0, 0)] / m.mass).abs() < 1e-13);
        assert!((tm.log_normalizer - m.mass.ln()).abs() < 1e-14);
    }

    #[test]
    fn symmetric_mixture() {
        let tm = tilted_moments(&bimodal(), &scalar(0.0), &Vector::zeros(1)).unwrap();
        assert!(tm.b[0].abs() < 1e-15);
        assert!((tm.second[(0, 0)] - 1.25).abs() < 1e-14);
        let g = gamma_mat(&bimodal(), &scalar(0.0), &scalar(1.0), &scalar(0.0), &Vector::zeros(1)).unwrap();
        assert!((g[(0, 0)] - 1.25).abs() < 1e-14);
    }

    #[test]
    fn mixture_matches_grid_quadrature() {
        let q = InitialDensity::mixture_1d(&[(0.4, -1.0, 0.3), (0.6, 1.5, 0.5)]).unwrap();
        let nodes: Vec<f64> = (0..=6000).map(|i| -10.0 + 20.0 * i as f64 / 6000.0).collect();
        let values: Vec<f64> = nodes.iter().map(|&x| q.pdf_1d(x)).collect();
        let g = InitialDensity::grid1d(nodes, values).unwrap();
        for (s, r) in [(0.0, 0.0), (0.5, 0.8), (1.5, -2.0)] {
            let a = tilted_moments(&q, &scalar(s), &Vector::from_element(1, r)).unwrap();
            let b = tilted_moments(&g, &scalar(s), &Vector::from_element(1, r)).unwrap();
            assert!((a.b[0] - b.b[0]).abs() <= 1e-6 * a.b[0].abs().max(1e-3));
            assert!((a.second[(0, 0)] - b.second[(0, 0)]).abs() <= 1e-6 * a.second[(0, 0)]);
            assert!((a.log_normalizer - b.log_normalizer).abs() < 1e-6);
        }
    }

    #[test]
    fn extreme_tilts_stay_finite() {
        let tm = tilted_moments(&bimodal(), &scalar(0.1), &Vector::from_element(1, 900.0)).unwrap();
        assert!(tm.log_normalizer.is_finite() && tm.log_normalizer > 700.0);
        assert!(tm.b[0].is_finite());
    }

    #[test]
    fn cov_derivative_matches_differences() {
        let nodes: Vec<f64> = (0..1601).map(|i| -8.0 + 0.01 * i as f64).collect();
        let values = nodes.iter().map(|&x| bimodal().pdf_1d(x)).collect();
        let grid = InitialDensity::grid1d(nodes, values).unwrap();
        let two = InitialDensity::mixture(
            vec![0.4, 0.6],
            vec![Vector::from_vec(vec![-1.0, 0.5]), Vector::from_vec(vec![1.0, 0.0])],
            vec![
                Mat::identity(2, 2) * 0.3,
                Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2]),
            ],
        )
        .unwrap();
        let cases = [
            (
                bimodal(),
                Mat::from_element(1, 1, 0.7),
                Vector::from_element(1, 0.4),
                Vector::from_element(1, 1.0),
            ),
            (
                grid,
                Mat::from_element(1, 1, 0.7),
                Vector::from_element(1, 0.4),
                Vector::from_element(1, 1.0),
            ),
            (
                two,
                Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
                Vector::from_vec(vec![0.3, -0.2]),
                Vector::from_vec(vec![0.6, -1.1]),
            ),
        ];
        for (q, s, rho, u) in cases {
            let h = 1e-5;
            let up = tilted_moments(&q, &s, &(&rho + &u * h)).unwrap().cov;
            let dn = tilted_moments(&q, &s, &(&rho - &u * h)).unwrap().cov;
            let fd = (up - dn) / (2.0 * h);
            let exact = tilted_law(&q, &s, &rho).unwrap().cov_derivative(&u);
            assert!((fd - &exact).amax() < 1e-7, "{exact}");
        }
        let g = InitialDensity::gaussian_1d(0.3, 2.0, 1.0).unwrap();
        let law = tilted_law(&g, &Mat::from_element(1, 1, 1.0), &Vector::from_element(1, 2.0)).unwrap();
        assert_eq!(law.cov_derivative(&Vector::from_element(1, 1.0))[(0, 0)], 0.0);
    }

    #[test]
    fn characteristic_at_zero_is_one() {
        let law = tilted_law(&bimodal(), &scalar(0.4), &Vector::from_element(1, 0.3)).unwrap();
        let c = law.characteristic(&Vector::zeros(1));
        assert!((c.re - 1.0).abs() < 1e-14 && c.im.abs() < 1e-14);
    }

    mod fd {
        use super::*;
        use proptest::prelude::*;

        /// Central differences of b in ρ against B − bbᵀ.
        fn check_derivative(q: &InitialDensity, s: &Mat, rho: &Vector) {
            let n = rho.len();
            let tm = tilted_moments(q, s, rho).unwrap();
            let h = 1e-5;
            let tol = 1e-5 * (1.0 + tm.second.norm());
            for j in 0..n {
                let mut up = rho.clone();
                let mut dn = rho.clone();
                up[j] += h;
                dn[j] -= h;
                let bu = tilted_moments(q, s, &up).unwrap().b;
                let bd = tilted_moments(q, s, &dn).unwrap().b;
                for i in 0..n {
                    let fd = (bu[i] - bd[i]) / (2.0 * h);
                    assert!((fd - tm.cov[(i, j)]).abs() <= tol, "{fd} vs {}", tm.cov[(i, j)]);
                }
            }
        }

        fn psd2(a: f64, b: f64, c: f64) -> Mat {
            let l = Mat::from_row_slice(2, 2, &[a, 0.0, b, c]);
            &l * l.transpose()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(20))]

            #[test]
            fn gaussian_2d(a in 0.0..2.0f64, b in -1.0..1.0f64, c in 0.0..2.0f64, r0 in -3.0..3.0f64, r1 in -3.0..3.0f64) {
                let q = InitialDensity::gaussian(
                    Vector::from_vec(vec![0.3, -0.2]),
                    Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
                    1.0,
                ).unwrap();
                check_derivative(&q, &psd2(a, b, c), &Vector::from_vec(vec![r0, r1]));
                let g = gamma_mat(&q, &psd2(0.1, 0.0, 0.2), &Mat::identity(2, 2), &psd2(a, b, c), &Vector::from_vec(vec![r0, r1])).unwrap();
                prop_assert!(crate::linalg::sym_eigenvalues(&g)[0] >= -1e-10);
            }

            #[test]
            fn mixture_2d(a in 0.0..2.0f64, b in -1.0..1.0f64, c in 0.0..2.0f64, r0 in -3.0..3.0f64, r1 in -3.0..3.0f64) {
                let q = InitialDensity::mixture(
                    vec![0.3, 0.7],
                    vec![Vector::from_vec(vec![-1.0, 0.5]), Vector::from_vec(vec![1.0, -0.5])],
                    vec![Mat::identity(2, 2) * 0.25, Mat::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3])],
                ).unwrap();
                check_derivative(&q, &psd2(a, b, c), &Vector::from_vec(vec![r0, r1]));
                let g = gamma_mat(&q, &psd2(0.1, 0.0, 0.2), &Mat::identity(2, 2), &psd2(a, b, c), &Vector::from_vec(vec![r0, r1])).unwrap();
                prop_assert!(crate::linalg::sym_eigenvalues(&g)[0] >= -1e-10);
            }

            #[test]
            fn grid_1d(s in 0.0..3.0f64, r in -4.0..4.0f64) {
                let m = bimodal();
                let nodes: Vec<f64> = (0..=800).map(|i| -6.0 + 12.0 * i as f64 / 800.0).collect();
                let values: Vec<f64> = nodes.iter().map(|&x| m.pdf_1d(x)).collect();
                let q = InitialDensity::grid1d(nodes, values).unwrap();
                check_derivative(&q, &scalar(s), &Vector::from_element(1, r));
                let g = gamma_mat(&q, &scalar(0.2), &scalar(0.8), &scalar(s), &Vector::from_element(1, r)).unwrap();
                prop_assert!(g[(0, 0)] >= -1e-10);
            }
        }
    }
}
