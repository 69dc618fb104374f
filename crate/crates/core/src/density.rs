//! Unnormalized initial laws q₀.
//!
//! Mass is carried explicitly and never silently renormalized: a density with
//! mass 2 is twice a probability density, and every downstream quantity that
//! is linear in q₀ (ν, the value function) scales with it.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{check_pd, spd_inverse_logdet, symmetrized, trapezoid_weights, Mat, Vector};

/// A normal component N(mean, cov) with cached precision and Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    mean: Vector,
    cov: Mat,
    precision: Mat,
    log_det: f64,
    chol: Mat,
}

impl GaussianComponent {
    pub fn new(mean: Vector, cov: Mat) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::ShapeMismatch {
                what: "component covariance",
                expected: format!("{n}x{n}"),
                found: format!("{}x{}", cov.nrows(), cov.ncols()),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDensity("non-finite mean".into()));
        }
        check_pd(&cov, "component covariance")?;
        let cov = symmetrized(cov);
        let (precision, log_det) =
            spd_inverse_logdet(&cov).map_err(|_| Error::NotPositiveDefinite("component covariance"))?;
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("component covariance"))?
            .l();
        Ok(Self {
            mean,
            cov,
            precision,
            log_det,
            chol,
        })
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }
    pub fn cov(&self) -> &Mat {
        &self.cov
    }
    pub fn precision(&self) -> &Mat {
        &self.precision
    }
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Normalized log-density at `x`.
    pub fn log_pdf(&self, x: &Vector) -> f64 {
        let d = x - &self.mean;
        let quad = d.dot(&(&self.precision * &d));
        let n = self.mean.len() as f64;
        -0.5 * (quad + self.log_det + n * (2.0 * std::f64::consts::PI).ln())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let z = Vector::from_fn(self.mean.len(), |_, _| rng.sample(StandardNormal));
        &self.mean + &self.chol * z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DensityKind {
    Gaussian(GaussianComponent),
    /// `fractions` sum to one; the overall mass lives on [`InitialDensity`].
    Mixture {
        fractions: Vec<f64>,
        components: Vec<GaussianComponent>,
    },
    /// Piecewise-linear tabulation on increasing nodes (n = 1 only).
    Grid1d {
        nodes: Vec<f64>,
        values: Vec<f64>,
    },
}

/// Unnormalized initial density q₀ with its total mass ∫q₀.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDensity {
    kind: DensityKind,
    mass: f64,
}

/// Order ≤ 2 moments: mass ∫q, normalized mean, raw second moment ∫xxᵀq.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mass: f64,
    pub mean: Vector,
    pub second_moment: Mat,
}

impl Moments {
    /// Normalized covariance `second_moment/mass − mean·meanᵀ`.
    pub fn covariance(&self) -> Mat {
        symmetrized(&self.second_moment / self.mass - &self.mean * self.mean.transpose())
    }
}

impl InitialDensity {
    pub fn gaussian(mean: Vector, cov: Mat, mass: f64) -> Result<Self> {
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::ZeroMass);
        }
        Ok(Self {
            kind: DensityKind::Gaussian(GaussianComponent::new(mean, cov)?),
            mass,
        })
    }

    /// Scalar Gaussian N(mean, var) with the given mass.
    pub fn gaussian_1d(mean: f64, var: f64, mass: f64) -> Result<Self> {
        Self::gaussian(Vector::from_element(1, mean), Mat::from_element(1, 1, var), mass)
    }

    /// Mixture Σ wₖ N(mₖ, Pₖ); the total mass is Σ wₖ.
    pub fn mixture(weights: Vec<f64>, means: Vec<Vector>, covs: Vec<Mat>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::InvalidDensity(
                "mixture needs equally many weights, means and covariances".into(),
            ));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidDensity("mixture weights must be positive".into()));
        }
        let dim = means[0].len();
        let components = means
            .into_iter()
            .zip(covs)
            .map(|(m, c)| {
                if m.len() != dim {
                    return Err(Error::ShapeMismatch {
                        what: "mixture mean",
                        expected: dim.to_string(),
                        found: m.len().to_string(),
                    });
                }
                GaussianComponent::new(m, c)
            })
            .collect::<Result<Vec<_>>>()?;
        let mass: f64 = weights.iter().sum();
        Ok(Self {
            kind: DensityKind::Mixture {
                fractions: weights.iter().map(|w| w / mass).collect(),
                components,
            },
            mass,
        })
    }

    /// Scalar mixture from (weight, mean, variance) triples.
    pub fn mixture_1d(parts: &[(f64, f64, f64)]) -> Result<Self> {
        Self::mixture(
            parts.iter().map(|p| p.0).collect(),
            parts.iter().map(|p| Vector::from_element(1, p.1)).collect(),
            parts.iter().map(|p| Mat::from_element(1, 1, p.2)).collect(),
        )
    }

    /// Tabulated scalar density; mass is the trapezoid integral.
    pub fn grid1d(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if nodes.len() < 3 || nodes.len() != values.len() {
            return Err(Error::InvalidDensity(
                "grid density needs at least 3 nodes and one value per node".into(),
            ));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || nodes.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidDensity("grid nodes must be strictly increasing".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidDensity("grid values must be nonnegative".into()));
        }
        let w = trapezoid_weights(&nodes);
        let mass: f64 = w.iter().zip(&values).map(|(a, b)| a * b).sum();
        let peak = values.iter().copied().fold(0.0, f64::max);
        if !(mass > 1e-300) || peak <= 0.0 {
            return Err(Error::ZeroMass);
        }
        let edge = values[0].max(*values.last().unwrap_or(&0.0));
        if edge >= 1e-12 * peak {
            return Err(Error::EdgeDecay { ratio: edge / peak });
        }
        Ok(Self {
            kind: DensityKind::Grid1d { nodes, values },
            mass,
        })
    }

    /// Multiply the density by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::ZeroMass);
        }
        let kind = match &self.kind {
            DensityKind::Grid1d { nodes, values } => DensityKind::Grid1d {
                nodes: nodes.clone(),
                values: values.iter().map(|v| v * c).collect(),
            },
            other => other.clone(),
        };
        Ok(Self {
            kind,
            mass: self.mass * c,
        })
    }

    pub fn kind(&self) -> &DensityKind {
        &self.kind
    }
    pub fn mass(&self) -> f64 {
        self.mass
    }
    pub fn dim(&self) -> usize {
        match &self.kind {
            DensityKind::Gaussian(c) => c.mean.len(),
            DensityKind::Mixture { components, .. } => components[0].mean.len(),
            DensityKind::Grid1d { .. } => 1,
        }
    }
    pub fn is_gaussian(&self) -> bool {
        matches!(self.kind, DensityKind::Gaussian(_))
    }
    /// (x̄₀, P₀) for the Gaussian variant.
    pub fn gaussian_params(&self) -> Option<(&Vector, &Mat)> {
        match &self.kind {
            DensityKind::Gaussian(c) => Some((&c.mean, &c.cov)),
            _ => None,
        }
    }

    /// Gaussian components with their mass fractions (empty for grid densities).
    pub fn components(&self) -> Vec<(f64, &GaussianComponent)> {
        match &self.kind {
            DensityKind::Gaussian(c) => vec![(1.0, c)],
            DensityKind::Mixture { fractions, components } => {
                fractions.iter().copied().zip(components.iter()).collect()
            }
            DensityKind::Grid1d { .. } => Vec::new(),
        }
    }

    /// Exact moments for Gaussian/mixture, trapezoid moments for grids.
    pub fn moments(&self) -> Result<Moments> {
        match &self.kind {
            DensityKind::Grid1d { nodes, values } => {
                let w = trapezoid_weights(nodes);
                let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
                for ((x, q), wi) in nodes.iter().zip(values).zip(&w) {
                    let c = q * wi;
                    m0 += c;
                    m1 += c * x;
                    m2 += c * x * x;
                }
                if !(m0 > 1e-300) {
                    return Err(Error::ZeroMass);
                }
                Ok(Moments {
                    mass: m0,
                    mean: Vector::from_element(1, m1 / m0),
                    second_moment: Mat::from_element(1, 1, m2),
                })
            }
            _ => {
                let n = self.dim();
                let mut mean = Vector::zeros(n);
                let mut second = Mat::zeros(n, n);
                for (frac, c) in self.components() {
                    mean += frac * &c.mean;
                    second += frac * (&c.cov + &c.mean * c.mean.transpose());
                }
                Ok(Moments {
                    mass: self.mass,
                    mean,
                    second_moment: symmetrized(second * self.mass),
                })
            }
        }
    }

    /// Unnormalized density value at a scalar point (n = 1).
    pub fn pdf_1d(&self, x: f64) -> f64 {
        match &self.kind {
            DensityKind::Grid1d { nodes, values } => interp_linear(nodes, values, x),
            _ => {
                let xv = Vector::from_element(1, x);
                self.mass
                    * self
                        .components()
                        .iter()
                        .map(|(f, c)| f * c.log_pdf(&xv).exp())
                        .sum::<f64>()
            }
        }
    }

    /// One draw from the normalized law q₀/mass.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        match &self.kind {
            DensityKind::Gaussian(c) => c.sample(rng),
            DensityKind::Mixture { fractions, components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = components.len() - 1;
                for (i, f) in fractions.iter().enumerate() {
                    acc += f;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                components[pick].sample(rng)
            }
            DensityKind::Grid1d { nodes, values } => {
                Vector::from_element(1, sample_piecewise_linear(nodes, values, rng.random()))
            }
        }
    }
}

pub(crate) fn interp_linear(nodes: &[f64], values: &[f64], x: f64) -> f64 {
    let n = nodes.len();
    if n == 0 || x < nodes[0] || x > nodes[n - 1] {
        return 0.0;
    }
    let i = match nodes.binary_search_by(|p| p.total_cmp(&x)) {
        Ok(i) => return values[i],
        Err(i) => i - 1,
    };
    let t = (x - nodes[i]) / (nodes[i + 1] - nodes[i]);
    values[i] * (1.0 - t) + values[i + 1] * t
}

/// Inverse CDF of the piecewise-linear density through `(nodes, values)`.
fn sample_piecewise_linear(nodes: &[f64], values: &[f64], u: f64) -> f64 {
    let areas: Vec<f64> = nodes
        .windows(2)
        .zip(values.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .collect();
    let total: f64 = areas.iter().sum();
    let mut target = u * total;
    for (i, a) in areas.iter().enumerate() {
        if target <= *a || i == areas.len() - 1 {
            let h = nodes[i + 1] - nodes[i];
            let (y0, y1) = (values[i], values[i + 1]);
            let slope = (y1 - y0) / h;
            target = target.min(*a);
            // y0·s + ½·slope·s² = target
            let s = if slope.abs() < 1e-14 * (y0.abs() + y1.abs() + 1e-300) / h {
                if y0 > 0.0 {
                    target / y0
                } else {
                    0.5 * h
                }
            } else {
                let disc = (y0 * y0 + 2.0 * slope * target).max(0.0);
                (disc.sqrt() - y0) / slope
            };
            return nodes[i] + s.clamp(0.0, h);
        }
        target -= a;
    }
    *nodes.last().unwrap_or(&0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bimodal() -> InitialDensity {
        InitialDensity::mixture_1d(&[(0.5, -1.0, 0.25), (0.5, 1.0, 0.25)]).unwrap()
    }

    #[test]
    fn standard_normal_moments() {
        let m = InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap().moments().unwrap();
        assert_eq!(m.mass, 1.0);
        assert_eq!(m.mean[0], 0.0);
        assert_eq!(m.second_moment[(0, 0)], 1.0);
    }

    #[test]
    fn mixture_moments() {
        let m = bimodal().moments().unwrap();
        assert!((m.mass - 1.0).abs() < 1e-15);
        assert!(m.mean[0].abs() < 1e-15);
        // Σ wₖ(mₖ² + Pₖ) = 1.25
        assert!((m.second_moment[(0, 0)] - 1.25).abs() < 1e-14);
    }

    #[test]
    fn scaled_mass_keeps_mean() {
        let q = InitialDensity::gaussian_1d(0.3, 2.0, 1.0).unwrap();
        let m2 = q.scaled(2.0).unwrap().moments().unwrap();
        assert_eq!(m2.mass, 2.0);
        assert!((m2.mean[0] - 0.3).abs() < 1e-15);
        assert!((m2.covariance()[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mixture_matches_tabulated_quadrature() {
        let q = InitialDensity::mixture_1d(&[(0.3, -1.5, 0.4), (0.7, 0.8, 0.2)]).unwrap();
        let nodes: Vec<f64> = (0..=8000).map(|i| -12.0 + 24.0 * i as f64 / 8000.0).collect();
        let values: Vec<f64> = nodes.iter().map(|&x| q.pdf_1d(x)).collect();
        let g = InitialDensity::grid1d(nodes, values).unwrap();
        let (a, b) = (q.moments().unwrap(), g.moments().unwrap());
        assert!((a.mass - b.mass).abs() / a.mass < 1e-6);
        assert!((a.mean[0] - b.mean[0]).abs() / a.mean[0].abs() < 1e-6);
        assert!((a.second_moment[(0, 0)] - b.second_moment[(0, 0)]).abs() / a.second_moment[(0, 0)] < 1e-6);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(matches!(
            InitialDensity::grid1d(vec![0.0, 1.0, 2.0], vec![0.0, 0.0, 0.0]),
            Err(Error::ZeroMass)
        ));
        assert!(matches!(
            InitialDensity::grid1d(vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 0.0]),
            Err(Error::EdgeDecay { .. })
        ));
        assert!(InitialDensity::grid1d(vec![0.0, 0.0, 2.0], vec![0.0, 1.0, 0.0]).is_err());
        assert!(InitialDensity::grid1d(vec![0.0, 1.0, 2.0], vec![0.0, -1.0, 0.0]).is_err());
    }

    #[test]
    fn mixture_rejects_nonpositive_weight_and_singular_cov() {
        assert!(InitialDensity::mixture_1d(&[(0.0, 0.0, 1.0)]).is_err());
        assert!(InitialDensity::mixture_1d(&[(1.0, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn grid_sampling_matches_moments() {
        let nodes: Vec<f64> = (0..=400).map(|i| -8.0 + 16.0 * i as f64 / 400.0).collect();
        let q = bimodal();
        let values: Vec<f64> = nodes.iter().map(|&x| q.pdf_1d(x)).collect();
        let g = InitialDensity::grid1d(nodes, values).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 40_000;
        let draws: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let se = (1.25f64 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se, "mean {mean}");
        assert!((var - 1.25).abs() < 0.05, "var {var}");
    }

    #[test]
    fn mixture_sampling_is_bimodal() {
        let q = bimodal();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| q.sample(&mut rng)[0]).collect();
        let near_zero = draws.iter().filter(|x| x.abs() < 0.2).count() as f64 / n as f64;
        let near_one = draws.iter().filter(|x| (x.abs() - 1.0).abs() < 0.2).count() as f64 / n as f64;
        assert!(near_one > 4.0 * near_zero);
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * (1.25f64 / n as f64).sqrt());
    }
}
