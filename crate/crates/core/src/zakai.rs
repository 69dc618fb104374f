//! Reference solutions of the Zakai equation.
//!
//! Two independent oracles for the unnormalized conditional density:
//!
//! - a finite-volume grid solver on a uniform 1D mesh, split into a
//!   Fokker–Planck substep and an exact multiplicative observation update;
//! - a particle system under the reference measure, where each particle
//!   carries the Girsanov weight `η = exp(∫Hx·dz − ½∫|Hx|²dt)`.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::density::InitialDensity;
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, trapezoid_weights, Mat, Vector};
use crate::model::LinearModel;

/// Order ≤ 2 moments of an unnormalized density.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleMoments {
    pub nu: f64,
    pub mean: Vector,
    pub cov: Mat,
}

/// Unnormalized density on a uniform mesh `x_i = x_lo + i·dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    x_lo: f64,
    dx: f64,
    values: Vec<f64>,
}

impl GridDensity {
    /// Wraps tabulated values on the mesh `x_lo + i·dx`.
    pub fn from_values(x_lo: f64, dx: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 3 || !(dx > 0.0) {
            return Err(Error::InvalidDensity("grid needs at least 3 nodes and dx > 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDensity("non-finite grid value".into()));
        }
        Ok(Self { x_lo, dx, values })
    }
    pub fn nodes(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.x(i)).collect()
    }
    pub fn x(&self, i: usize) -> f64 {
        self.x_lo + i as f64 * self.dx
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest boundary value relative to the interior maximum.
    pub fn boundary_ratio(&self) -> f64 {
        let max = self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let edge = self.values[0].abs().max(self.values[self.values.len() - 1].abs());
        if max > 0.0 {
            edge / max
        } else {
            0.0
        }
    }

    /// Explicit-Euler stability limit for the Fokker–Planck substep with control `v`.
    pub fn cfl_limit(&self, model: &LinearModel, v: f64) -> f64 {
        let a = model.a()[(0, 0)];
        let (f, g) = (model.f()[(0, 0)], model.g()[(0, 0)]);
        let x_hi = self.x(self.values.len() - 1);
        let vel = (f * self.x_lo + g * v).abs().max((f * x_hi + g * v).abs());
        let diff = if a > 0.0 {
            0.4 * self.dx * self.dx / (2.0 * a)
        } else {
            f64::INFINITY
        };
        let adv = if vel > 0.0 { 0.4 * self.dx / vel } else { f64::INFINITY };
        diff.min(adv)
    }
}

/// Tabulates q₀ on `n_cells` nodes spanning `mean ± width_sigmas·std`.
pub fn init_grid(q0: &InitialDensity, n_cells: usize, width_sigmas: f64) -> Result<GridDensity> {
    if q0.dim() != 1 {
        return Err(Error::Unsupported("grid oracle is one-dimensional"));
    }
    if n_cells < 3 {
        return Err(Error::ShapeMismatch {
            what: "grid cells",
            expected: ">= 3".into(),
            found: n_cells.to_string(),
        });
    }
    let m = q0.moments()?;
    let std = m.covariance()[(0, 0)].sqrt();
    let (lo, hi) = (m.mean[0] - width_sigmas * std, m.mean[0] + width_sigmas * std);
    let dx = (hi - lo) / (n_cells - 1) as f64;
    let grid = GridDensity {
        x_lo: lo,
        dx,
        values: (0..n_cells).map(|i| q0.pdf_1d(lo + i as f64 * dx)).collect(),
    };
    let ratio = grid.boundary_ratio();
    if ratio > 1e-9 {
        return Err(Error::DomainTooNarrow { ratio });
    }
    Ok(grid)
}

fn fokker_planck_substep(q: &GridDensity, model: &LinearModel, v: f64, dt: f64) -> Result<Vec<f64>> {
    let a = model.a()[(0, 0)];
    let (f, g) = (model.f()[(0, 0)], model.g()[(0, 0)]);
    let n = q.values.len();
    let dx = q.dx;
    let vals = &q.values;
    // Interface fluxes; the outermost ones are zero so mass is conserved exactly.
    let mut flux = vec![0.0; n + 1];
    for i in 0..n - 1 {
        let u = f * (q.x(i) + 0.5 * dx) + g * v;
        let adv = if u.abs() * dx <= 2.0 * a {
            0.5 * u * (vals[i] + vals[i + 1])
        } else if u > 0.0 {
            u * vals[i]
        } else {
            u * vals[i + 1]
        };
        flux[i + 1] = adv - a * (vals[i + 1] - vals[i]) / dx;
    }
    let out: Vec<f64> = (0..n).map(|i| vals[i] - dt / dx * (flux[i + 1] - flux[i])).collect();
    let max = out.iter().fold(0.0_f64, |m, v| m.max(*v));
    if let Some(&bad) = out.iter().find(|&&v| v < -1e-12 * max) {
        return Err(Error::NegativeDensity { value: bad });
    }
    Ok(out)
}

fn observation_update(values: &mut [f64], q: &GridDensity, model: &LinearModel, dz: f64, dt: f64) {
    let h = model.h()[(0, 0)];
    for (i, val) in values.iter_mut().enumerate() {
        let hx = h * q.x(i);
        *val *= (hx * dz - 0.5 * hx * hx * dt).exp();
    }
}

/// One split step; fails when `dt` exceeds the explicit stability limit.
pub fn step_zakai_grid(q: &GridDensity, model: &LinearModel, v: f64, dz: f64, dt: f64) -> Result<GridDensity> {
    let limit = q.cfl_limit(model, v);
    if dt > limit {
        return Err(Error::CflViolation { dt, limit });
    }
    let mut values = fokker_planck_substep(q, model, v, dt)?;
    observation_update(&mut values, q, model, dz, dt);
    Ok(GridDensity { values, ..q.clone() })
}

/// Advances over `dt`, sub-stepping the Fokker–Planck part as needed for
/// stability and applying the observation update once for the whole step.
pub fn advance_zakai_grid(q: &GridDensity, model: &LinearModel, v: f64, dz: f64, dt: f64) -> Result<GridDensity> {
    let limit = q.cfl_limit(model, v);
    let subs = (dt / limit).ceil().max(1.0) as usize;
    let h = dt / subs as f64;
    let mut cur = q.clone();
    for _ in 0..subs {
        cur.values = fokker_planck_substep(&cur, model, v, h)?;
    }
    observation_update(&mut cur.values, q, model, dz, dt);
    Ok(cur)
}

pub fn grid_moments(q: &GridDensity) -> Result<OracleMoments> {
    let xs = q.nodes();
    let w = trapezoid_weights(&xs);
    let nu: f64 = q.values.iter().zip(&w).map(|(v, w)| v * w).sum();
    if !(nu > 0.0) {
        return Err(Error::ZeroMass);
    }
    let mean = q
        .values
        .iter()
        .zip(&w)
        .zip(&xs)
        .map(|((v, w), x)| v * w * x)
        .sum::<f64>()
        / nu;
    let var = q
        .values
        .iter()
        .zip(&w)
        .zip(&xs)
        .map(|((v, w), x)| v * w * (x - mean).powi(2))
        .sum::<f64>()
        / nu;
    Ok(OracleMoments {
        nu,
        mean: Vector::from_element(1, mean),
        cov: Mat::from_element(1, 1, var),
    })
}

/// Weighted particles under the reference measure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    dim: usize,
    /// Row-major `count × dim`.
    positions: Vec<f64>,
    log_weights: Vec<f64>,
    base_mass: f64,
}

/// Particle moments with Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleMoments {
    pub moments: OracleMoments,
    pub ess: f64,
    pub nu_se: f64,
    pub mean_se: Vector,
    pub cov_se: Mat,
}

const CHUNK: usize = 4096;

impl ParticleCloud {
    pub fn count(&self) -> usize {
        self.log_weights.len()
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }
    pub fn base_mass(&self) -> f64 {
        self.base_mass
    }
}

pub fn init_particles<R: Rng + ?Sized>(q0: &InitialDensity, count: usize, rng: &mut R) -> Result<ParticleCloud> {
    if count == 0 {
        return Err(Error::ShapeMismatch {
            what: "particle count",
            expected: ">= 1".into(),
            found: "0".into(),
        });
    }
    let dim = q0.dim();
    let mut positions = Vec::with_capacity(count * dim);
    for _ in 0..count {
        positions.extend(q0.sample(rng).iter());
    }
    Ok(ParticleCloud {
        dim,
        positions,
        log_weights: vec![0.0; count],
        base_mass: q0.mass(),
    })
}

/// Euler–Maruyama move plus exact weight update, parallel over fixed chunks.
/// Each chunk draws from its own stream of a seed taken from `rng`, so results
/// do not depend on the thread count.
pub fn step_particles<R: Rng + ?Sized>(
    cloud: &ParticleCloud,
    model: &LinearModel,
    v: &Vector,
    dz: &Vector,
    dt: f64,
    rng: &mut R,
) -> ParticleCloud {
    let n = cloud.dim;
    let seed: u64 = rng.random();
    let drift_c: Vec<f64> = (model.g() * v).iter().copied().collect();
    let (f, sigma, h) = (model.f(), model.sigma(), model.h());
    let d = h.nrows();
    let sq = dt.sqrt();
    let mut out = cloud.clone();
    out.positions
        .par_chunks_mut(CHUNK * n)
        .zip(out.log_weights.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(c, (pos, lw))| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(c as u64);
            let mut xi = vec![0.0; n];
            let mut x = vec![0.0; n];
            for (p, w) in pos.chunks_mut(n).zip(lw.iter_mut()) {
                x.copy_from_slice(p);
                for j in 0..d {
                    let hx: f64 = (0..n).map(|l| h[(j, l)] * x[l]).sum();
                    *w += hx * dz[j] - 0.5 * hx * hx * dt;
                }
                for e in xi.iter_mut() {
                    *e = StandardNormal.sample(&mut r);
                }
                for i in 0..n {
                    let drift: f64 = (0..n).map(|l| f[(i, l)] * x[l]).sum::<f64>() + drift_c[i];
                    let noise: f64 = (0..n).map(|l| sigma[(i, l)] * xi[l]).sum();
                    p[i] = x[i] + drift * dt + sq * noise;
                }
            }
        });
    out
}

/// Multinomial resampling; the mean weight is folded into `base_mass`.
pub fn resample<R: Rng + ?Sized>(cloud: &ParticleCloud, rng: &mut R) -> Result<ParticleCloud> {
    let count = cloud.count();
    let lse = log_sum_exp(&cloud.log_weights);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights { ess: 0.0 });
    }
    let w: Vec<f64> = cloud.log_weights.iter().map(|l| (l - lse).exp()).collect();
    let idx = WeightedIndex::new(&w).map_err(|_| Error::DegenerateWeights { ess: 0.0 })?;
    let mut positions = Vec::with_capacity(cloud.positions.len());
    for _ in 0..count {
        positions.extend_from_slice(cloud.position(idx.sample(rng)));
    }
    Ok(ParticleCloud {
        dim: cloud.dim,
        positions,
        log_weights: vec![0.0; count],
        base_mass: cloud.base_mass * (lse - (count as f64).ln()).exp(),
    })
}

/// Weighted moments, effective sample size and delta-method standard errors.
pub fn particle_moments(cloud: &ParticleCloud) -> Result<ParticleMoments> {
    let count = cloud.count();
    let n = cloud.dim;
    let max = cloud.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights { ess: 0.0 });
    }
    let raw: Vec<f64> = cloud.log_weights.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = raw.iter().sum();
    let sum_sq: f64 = raw.iter().map(|w| w * w).sum();
    let ess = sum * sum / sum_sq;
    if ess < 10.0 && count >= 10 {
        return Err(Error::DegenerateWeights { ess });
    }
    let scale = max.exp();
    let nf = count as f64;
    let eta_mean = sum / nf;
    let eta_var = raw.iter().map(|w| (w - eta_mean).powi(2)).sum::<f64>() / (nf - 1.0).max(1.0);
    let nu = cloud.base_mass * scale * eta_mean;
    let nu_se = cloud.base_mass * scale * (eta_var / nf).sqrt();

    let mut mean = Vector::zeros(n);
    for (i, w) in raw.iter().enumerate() {
        for j in 0..n {
            mean[j] += w / sum * cloud.positions[i * n + j];
        }
    }
    let mut cov = Mat::zeros(n, n);
    for (i, w) in raw.iter().enumerate() {
        let p = cloud.position(i);
        for j in 0..n {
            for k in 0..n {
                cov[(j, k)] += w / sum * (p[j] - mean[j]) * (p[k] - mean[k]);
            }
        }
    }
    let mut mean_var = Vector::zeros(n);
    let mut cov_var = Mat::zeros(n, n);
    for (i, w) in raw.iter().enumerate() {
        let wn2 = (w / sum).powi(2);
        let p = cloud.position(i);
        for j in 0..n {
            mean_var[j] += wn2 * (p[j] - mean[j]).powi(2);
            for k in 0..n {
                cov_var[(j, k)] += wn2 * ((p[j] - mean[j]) * (p[k] - mean[k]) - cov[(j, k)]).powi(2);
            }
        }
    }
    Ok(ParticleMoments {
        moments: OracleMoments { nu, mean, cov },
        ess,
        nu_se,
        mean_se: mean_var.map(f64::sqrt),
        cov_se: cov_var.map(f64::sqrt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc1() -> LinearModel {
        LinearModel::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap()
    }

    fn bimodal() -> InitialDensity {
        InitialDensity::mixture_1d(&[(0.5, -1.0, 0.25), (0.5, 1.0, 0.25)]).unwrap()
    }

    #[test]
    fn init_grid_masses() {
        let g = init_grid(&InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap(), 1601, 8.0).unwrap();
        assert!((grid_moments(&g).unwrap().nu - 1.0).abs() < 1e-9);
        let g = init_grid(&bimodal(), 1601, 8.0).unwrap();
        let m = grid_moments(&g).unwrap();
        assert!((m.nu - 1.0).abs() < 1e-8);
        assert!((m.cov[(0, 0)] - 1.25).abs() < 1e-8);
        assert!(matches!(
            init_grid(&bimodal(), 101, 2.0),
            Err(Error::DomainTooNarrow { .. })
        ));
    }

    #[test]
    fn grid_input_is_resampled_identically() {
        let nodes: Vec<f64> = (0..=400).map(|i| -8.0 + 16.0 * i as f64 / 400.0).collect();
        let values: Vec<f64> = nodes.iter().map(|x| (-0.5 * x * x).exp()).collect();
        let q = InitialDensity::grid1d(nodes.clone(), values.clone()).unwrap();
        let m = q.moments().unwrap();
        let g = init_grid(&q, 401, 8.0 / m.covariance()[(0, 0)].sqrt()).unwrap();
        for (i, v) in g.values().iter().enumerate() {
            assert!((v - q.pdf_1d(g.x(i))).abs() < 1e-15);
        }
        assert!((g.x(0) + 8.0).abs() < 1e-6 && (g.dx() - 0.04).abs() < 1e-8);
    }

    #[test]
    fn trivial_generator_leaves_grid_unchanged() {
        let model = LinearModel::scalar(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let g = init_grid(&bimodal(), 401, 8.0).unwrap();
        let next = step_zakai_grid(&g, &model, 0.7, 0.3, 0.01).unwrap();
        assert_eq!(next, g);
    }

    #[test]
    fn grid_mass_is_conserved_without_observation() {
        let model = LinearModel::scalar(-0.8, 1.3, 0.0, 0.9, 1.0, 1.0, 0.0, 1.0).unwrap();
        let g = init_grid(&bimodal(), 801, 8.0).unwrap();
        let m0 = grid_moments(&g).unwrap().nu;
        let next = step_zakai_grid(&g, &model, 0.4, 0.0, 0.5 * g.cfl_limit(&model, 0.4)).unwrap();
        assert!((grid_moments(&next).unwrap().nu - m0).abs() < 1e-12);
    }

    #[test]
    fn cfl_violation_reported() {
        let g = init_grid(&bimodal(), 1601, 8.0).unwrap();
        assert!(matches!(
            step_zakai_grid(&g, &sc1(), 0.0, 0.0, 1e-3),
            Err(Error::CflViolation { .. })
        ));
        assert!(advance_zakai_grid(&g, &sc1(), 0.0, 0.0, 1e-3).is_ok());
    }

    #[test]
    fn gaussian_grid_tracks_riccati_variance() {
        let model = sc1();
        let q = InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap();
        let mut g = init_grid(&q, 801, 10.0).unwrap();
        let dt = 1e-3;
        for k in 0..1000 {
            let dz = 0.002 * (k as f64 * 0.01).cos();
            g = advance_zakai_grid(&g, &model, -0.2, dz, dt).unwrap();
        }
        let m = grid_moments(&g).unwrap();
        assert!((m.cov[(0, 0)] - 1.0).abs() < 0.01);
    }

    #[test]
    fn particles_initial_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = init_particles(&InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap(), 100_000, &mut rng).unwrap();
        let m = particle_moments(&c).unwrap();
        assert!(m.moments.mean[0].abs() < 3.0 * 1e5f64.powf(-0.5));
        assert_eq!(m.ess, 1e5);
        assert_eq!(m.moments.nu, 1.0);
        let c = init_particles(&bimodal(), 20_000, &mut rng).unwrap();
        let m = particle_moments(&c).unwrap();
        assert!(m.moments.mean[0].abs() < 3.0 * m.mean_se[0]);
        let near_zero = (0..c.count()).filter(|&i| c.position(i)[0].abs() < 0.2).count();
        let near_one = (0..c.count()).filter(|&i| (c.position(i)[0] - 1.0).abs() < 0.2).count();
        assert!(near_one > 3 * near_zero);
        let one = init_particles(&InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap(), 1, &mut rng).unwrap();
        assert_eq!(one.count(), 1);
        assert_eq!(one.log_weights(), &[0.0]);
    }

    #[test]
    fn frozen_particles_carry_girsanov_weights() {
        let model = LinearModel::scalar(0.0, 0.0, 0.7, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c0 = init_particles(&bimodal(), 100, &mut rng).unwrap();
        let mut c = c0.clone();
        let (dt, mut z) = (0.01, 0.0);
        for k in 0..100 {
            let dz = 0.05 * ((k as f64).sin());
            z += dz;
            c = step_particles(
                &c,
                &model,
                &Vector::zeros(1),
                &Vector::from_element(1, dz),
                dt,
                &mut rng,
            );
        }
        for i in 0..100 {
            let x = c0.position(i)[0];
            assert_eq!(c.position(i)[0], x);
            let expect = 0.7 * x * z - 0.5 * 0.49 * x * x * 1.0;
            assert!((c.log_weights()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn no_observation_freezes_weights() {
        let model = LinearModel::scalar(-1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = init_particles(&bimodal(), 50_000, &mut rng).unwrap();
        for _ in 0..200 {
            c = step_particles(
                &c,
                &model,
                &Vector::from_element(1, 0.5),
                &Vector::from_element(1, 1.0),
                0.01,
                &mut rng,
            );
        }
        assert!(c.log_weights().iter().all(|&w| w == 0.0));
        // Ornstein–Uhlenbeck mean relaxes toward 0.5 from 0: 0.5(1 − e^{−2}).
        let m = particle_moments(&c).unwrap();
        assert!((m.moments.mean[0] - 0.5 * (1.0 - (-2.0f64).exp())).abs() < 4.0 * m.mean_se[0] + 0.01);
    }

    #[test]
    fn particle_steps_are_reproducible() {
        let model = sc1();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut c = init_particles(&bimodal(), 10_000, &mut rng).unwrap();
            for _ in 0..10 {
                c = step_particles(
                    &c,
                    &model,
                    &Vector::zeros(1),
                    &Vector::from_element(1, 0.01),
                    0.01,
                    &mut rng,
                );
            }
            c
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resampling_keeps_mass() {
        let model = sc1();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = init_particles(&bimodal(), 20_000, &mut rng).unwrap();
        for _ in 0..50 {
            c = step_particles(
                &c,
                &model,
                &Vector::zeros(1),
                &Vector::from_element(1, 0.03),
                0.01,
                &mut rng,
            );
        }
        let before = particle_moments(&c).unwrap().moments.nu;
        let r = resample(&c, &mut rng).unwrap();
        assert!((r.base_mass() - before).abs() < 1e-12 * before);
        assert_eq!(particle_moments(&r).unwrap().ess, 20_000.0);
    }

    #[test]
    fn degenerate_weights_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = init_particles(&bimodal(), 100, &mut rng).unwrap();
        for (i, w) in c.log_weights.iter_mut().enumerate() {
            *w = if i == 0 { 0.0 } else { -1000.0 };
        }
        assert!(matches!(particle_moments(&c), Err(Error::DegenerateWeights { .. })));
    }
}
