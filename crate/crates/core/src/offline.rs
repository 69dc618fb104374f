//! Deterministic, observation-independent time paths.
//!
//! Filtering side (forward in time):
//!
//! ```text
//! dΣ/dt = 2a + FΣ + ΣFᵀ − ΣHᵀHΣ,     Σ(0) = 0
//! dΦ/dt = (F − ΣHᵀH)Φ,               Φ(0) = I
//! S(t)  = ∫₀ᵗ ΦᵀHᵀHΦ ds
//! ```
//!
//! Control side (backward): `dπ/dt + πF + Fᵀπ − πGN⁻¹Gᵀπ + M = 0`, `π(T) = M_T`.
//!
//! All ODEs use classical RK4 on the experiment grid. Every path keeps the ODE
//! right-hand side at each node so that off-node values come from cubic Hermite
//! interpolation, which preserves fourth-order accuracy for the coupled solves.

use crate::error::{Error, Result};
use crate::linalg::{max_abs, spd_inverse_logdet, symmetrize, symmetrized, Mat};
use crate::model::{LinearModel, TimeGrid};

const BLOWUP: f64 = 1e12;

/// Matrix samples at grid nodes plus their time derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPath {
    dt: f64,
    values: Vec<Mat>,
    derivs: Vec<Mat>,
}

impl MatrixPath {
    fn new(dt: f64, values: Vec<Mat>, derivs: Vec<Mat>) -> Self {
        debug_assert_eq!(values.len(), derivs.len());
        Self { dt, values, derivs }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn value(&self, k: usize) -> &Mat {
        &self.values[k]
    }
    pub fn deriv(&self, k: usize) -> &Mat {
        &self.derivs[k]
    }
    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    /// Cubic Hermite interpolation at time `t` (clamped to the grid).
    pub fn at(&self, t: f64) -> Mat {
        let last = self.values.len() - 1;
        let pos = (t / self.dt).clamp(0.0, last as f64);
        let k = (pos.floor() as usize).min(last.saturating_sub(1));
        let s = pos - k as f64;
        if last == 0 || s <= 0.0 {
            return self.values[k].clone();
        }
        if s >= 1.0 {
            return self.values[k + 1].clone();
        }
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        &self.values[k] * h00
            + &self.derivs[k] * (h10 * self.dt)
            + &self.values[k + 1] * h01
            + &self.derivs[k + 1] * (h11 * self.dt)
    }
}

/// One RK4 step for a system of matrices, with a projection applied after
/// every stage (used for symmetrization).
fn rk4_step<F, P>(y: &[Mat], t: f64, h: f64, rhs: &F, project: &P) -> Vec<Mat>
where
    F: Fn(f64, &[Mat]) -> Vec<Mat>,
    P: Fn(&mut [Mat]),
{
    let axpy = |base: &[Mat], c: f64, k: &[Mat]| -> Vec<Mat> {
        let mut out: Vec<Mat> = base.iter().zip(k).map(|(b, d)| b + d * c).collect();
        project(&mut out);
        out
    };
    let k1 = rhs(t, y);
    let k2 = rhs(t + 0.5 * h, &axpy(y, 0.5 * h, &k1));
    let k3 = rhs(t + 0.5 * h, &axpy(y, 0.5 * h, &k2));
    let k4 = rhs(t + h, &axpy(y, h, &k3));
    let mut out: Vec<Mat> = (0..y.len())
        .map(|i| &y[i] + (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (h / 6.0))
        .collect();
    project(&mut out);
    out
}

fn check_finite(ys: &[Mat], t: f64) -> Result<()> {
    if ys
        .iter()
        .any(|m| m.iter().any(|v| !v.is_finite()) || max_abs(m) > BLOWUP)
    {
        Err(Error::RiccatiBlowup { t })
    } else {
        Ok(())
    }
}

/// Node values and node derivatives of an integrated system.
type Trajectory = (Vec<Vec<Mat>>, Vec<Vec<Mat>>);

/// Integrate forward over the grid; returns node values and node derivatives.
fn integrate_forward<F, P>(grid: &TimeGrid, y0: Vec<Mat>, rhs: F, project: P) -> Result<Trajectory>
where
    F: Fn(f64, &[Mat]) -> Vec<Mat>,
    P: Fn(&mut [Mat]),
{
    let dt = grid.dt();
    let mut ys = vec![y0];
    for k in 0..grid.n_steps() {
        let next = rk4_step(&ys[k], grid.t(k), dt, &rhs, &project);
        check_finite(&next, grid.t(k + 1))?;
        ys.push(next);
    }
    let ds = ys.iter().enumerate().map(|(k, y)| rhs(grid.t(k), y)).collect();
    Ok((ys, ds))
}

/// Integrate backward from the terminal node; output is indexed by node.
fn integrate_backward<F, P>(grid: &TimeGrid, y_t: Vec<Mat>, rhs: F, project: P) -> Result<Trajectory>
where
    F: Fn(f64, &[Mat]) -> Vec<Mat>,
    P: Fn(&mut [Mat]),
{
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut ys: Vec<Option<Vec<Mat>>> = vec![None; n + 1];
    ys[n] = Some(y_t);
    for k in (0..n).rev() {
        let cur = ys[k + 1].as_ref().expect("filled");
        let prev = rk4_step(cur, grid.t(k + 1), -dt, &rhs, &project);
        check_finite(&prev, grid.t(k))?;
        ys[k] = Some(prev);
    }
    let ys: Vec<Vec<Mat>> = ys.into_iter().map(|y| y.expect("filled")).collect();
    let ds = ys.iter().enumerate().map(|(k, y)| rhs(grid.t(k), y)).collect();
    Ok((ys, ds))
}

fn split(ys: Vec<Vec<Mat>>, ds: Vec<Vec<Mat>>, idx: usize, dt: f64) -> MatrixPath {
    MatrixPath::new(
        dt,
        ys.iter().map(|y| y[idx].clone()).collect(),
        ds.iter().map(|d| d[idx].clone()).collect(),
    )
}

/// Density-independent paths Σ, Φ, S and π on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSolution {
    grid: TimeGrid,
    sigma: MatrixPath,
    phi: MatrixPath,
    s: MatrixPath,
    pi: MatrixPath,
}

/// Interpolated offline quantities at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSample {
    pub sigma: Mat,
    pub phi: Mat,
    pub s: Mat,
    pub pi: Mat,
}

impl OfflineSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn sigma_path(&self) -> &MatrixPath {
        &self.sigma
    }
    pub fn phi_path(&self) -> &MatrixPath {
        &self.phi
    }
    pub fn s_path(&self) -> &MatrixPath {
        &self.s
    }
    pub fn pi_path(&self) -> &MatrixPath {
        &self.pi
    }
    pub fn sigma(&self, k: usize) -> &Mat {
        self.sigma.value(k)
    }
    pub fn phi(&self, k: usize) -> &Mat {
        self.phi.value(k)
    }
    pub fn s(&self, k: usize) -> &Mat {
        self.s.value(k)
    }
    pub fn pi(&self, k: usize) -> &Mat {
        self.pi.value(k)
    }
    /// dπ/dt at node k, read off the Riccati right-hand side.
    pub fn pi_dot(&self, k: usize) -> &Mat {
        self.pi.deriv(k)
    }
    pub fn sample_at(&self, t: f64) -> OfflineSample {
        OfflineSample {
            sigma: symmetrized(self.sigma.at(t)),
            phi: self.phi.at(t),
            s: symmetrized(self.s.at(t)),
            pi: symmetrized(self.pi.at(t)),
        }
    }
    pub fn sample(&self, k: usize) -> OfflineSample {
        OfflineSample {
            sigma: self.sigma(k).clone(),
            phi: self.phi(k).clone(),
            s: self.s(k).clone(),
            pi: self.pi(k).clone(),
        }
    }
}

/// Control Riccati right-hand side dπ/dt.
fn pi_rhs(model: &LinearModel, pi: &Mat) -> Mat {
    -(pi * model.f() + model.f().transpose() * pi - pi * model.control_weight() * pi + model.m())
}

pub fn solve_offline(model: &LinearModel, grid: &TimeGrid) -> Result<OfflineSolution> {
    let n = model.state_dim();
    let dt = grid.dt();
    let f = model.f();
    let hth = model.obs_weight();
    let two_a = model.a() * 2.0;

    let filter_rhs = |_t: f64, y: &[Mat]| -> Vec<Mat> {
        let (sig, phi) = (&y[0], &y[1]);
        let dsig = &two_a + f * sig + sig * f.transpose() - sig * hth * sig;
        let dphi = (f - sig * hth) * phi;
        vec![dsig, dphi]
    };
    let (ys, ds) = integrate_forward(grid, vec![Mat::zeros(n, n), Mat::identity(n, n)], filter_rhs, |y| {
        symmetrize(&mut y[0])
    })?;
    let sigma = split(ys.clone(), ds.clone(), 0, dt);
    let phi = split(ys, ds, 1, dt);

    // S by the end-corrected trapezoid rule on the Φ samples:
    // S_k = Σ trapezoid + dt²/12·(f'(0) − f'(t_k)), f = ΦᵀHᵀHΦ.
    let integrand: Vec<Mat> = phi.values().iter().map(|p| p.transpose() * hth * p).collect();
    let integrand_dot: Vec<Mat> = (0..phi.len())
        .map(|k| {
            let (p, dp) = (phi.value(k), phi.deriv(k));
            dp.transpose() * hth * p + p.transpose() * hth * dp
        })
        .collect();
    let mut s_vals = Vec::with_capacity(phi.len());
    let mut acc = Mat::zeros(n, n);
    s_vals.push(acc.clone());
    for k in 1..phi.len() {
        acc += (&integrand[k - 1] + &integrand[k]) * (0.5 * dt);
        let corr = (&integrand_dot[0] - &integrand_dot[k]) * (dt * dt / 12.0);
        s_vals.push(symmetrized(&acc + corr));
    }
    let s = MatrixPath::new(dt, s_vals, integrand.into_iter().map(symmetrized).collect());

    let (ys, ds) = integrate_backward(
        grid,
        vec![symmetrized(model.m_t().clone())],
        |_t, y| vec![pi_rhs(model, &y[0])],
        |y| symmetrize(&mut y[0]),
    )?;
    let pi = split(ys, ds, 0, dt);

    Ok(OfflineSolution {
        grid: *grid,
        sigma,
        phi,
        s,
        pi,
    })
}

/// Closed-form bundle for a Gaussian initial law N(x̄₀, P₀).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOffline {
    p: MatrixPath,
    lambda: MatrixPath,
    beta: Vec<f64>,
    mu: Vec<f64>,
    innovation_cost: Vec<f64>,
}

impl GaussianOffline {
    /// Conditional covariance P(t).
    pub fn p(&self, k: usize) -> &Mat {
        self.p.value(k)
    }
    pub fn p_path(&self) -> &MatrixPath {
        &self.p
    }
    /// Quadratic coefficient Λ(t) of Z(x, t) = xᵀΛx + β.
    pub fn lambda(&self, k: usize) -> &Mat {
        self.lambda.value(k)
    }
    pub fn lambda_path(&self) -> &MatrixPath {
        &self.lambda
    }
    /// Offset β(t) = ∫ₜᵀ tr[Λ(2a + PHᵀHP) + 2aπ] ds.
    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k]
    }
    /// μ(t) = ∫ₜᵀ tr[(M + πPHᵀH)P] ds + tr(M_T P(T)).
    pub fn mu(&self, k: usize) -> f64 {
        self.mu[k]
    }
    /// The innovation part of μ: ∫ₜᵀ tr(πPHᵀHP) ds + tr(M_T P(T)).
    pub fn innovation_cost(&self, k: usize) -> f64 {
        self.innovation_cost[k]
    }
}

pub fn solve_gaussian_offline(
    model: &LinearModel,
    grid: &TimeGrid,
    offline: &OfflineSolution,
    p0: &Mat,
) -> Result<GaussianOffline> {
    crate::linalg::check_pd(p0, "P0")?;
    let dt = grid.dt();
    let f = model.f();
    let hth = model.obs_weight();
    let a = model.a();
    let two_a = a * 2.0;

    let p_rhs = |_t: f64, y: &[Mat]| -> Vec<Mat> {
        let p = &y[0];
        vec![&two_a + f * p + p * f.transpose() - p * hth * p]
    };
    let (ys, ds) = integrate_forward(grid, vec![symmetrized(p0.clone())], p_rhs, |y| symmetrize(&mut y[0]))?;
    let p = split(ys, ds, 0, dt);

    // Algebraic identity P = Σ + Φ(S + P₀⁻¹)⁻¹Φᵀ on every node.
    let (p0_inv, _) = spd_inverse_logdet(p0)?;
    let mut worst = 0.0_f64;
    for k in 0..p.len() {
        let inner = (offline.s(k) + &p0_inv).try_inverse().ok_or(Error::SingularTilt {
            condition: f64::INFINITY,
        })?;
        let rhs = offline.sigma(k) + offline.phi(k) * inner * offline.phi(k).transpose();
        worst = worst.max(max_abs(&(p.value(k) - rhs)));
    }
    if worst > 1e-5 {
        return Err(Error::IdentityViolation {
            what: "P = Σ + Φ(S + P0⁻¹)⁻¹Φᵀ",
            residual: worst,
            tolerance: 1e-5,
        });
    }

    // Backward system (Λ, β, μ, innovation part of μ), scalars as 1x1.
    let p_path = &p;
    let pi_path = offline.pi_path();
    let m_cost = model.m();
    let gng = model.control_weight();
    let back_rhs = |t: f64, y: &[Mat]| -> Vec<Mat> {
        let lam = &y[0];
        let pt = p_path.at(t);
        let pit = pi_path.at(t);
        let closed = f - &pt * hth;
        let dlam = -(lam * &closed + closed.transpose() * lam + &pit * gng * &pit);
        let php = &pt * hth * &pt;
        let dbeta = -((lam * (&two_a + &php)).trace() + 2.0 * (a * &pit).trace());
        let innovation = (&pit * &php).trace();
        let dmu = -((m_cost * &pt).trace() + innovation);
        vec![
            dlam,
            Mat::from_element(1, 1, dbeta),
            Mat::from_element(1, 1, dmu),
            Mat::from_element(1, 1, -innovation),
        ]
    };
    let n = model.state_dim();
    let terminal_mu = (model.m_t() * p.value(p.len() - 1)).trace();
    let (ys, ds) = integrate_backward(
        grid,
        vec![
            Mat::zeros(n, n),
            Mat::zeros(1, 1),
            Mat::from_element(1, 1, terminal_mu),
            Mat::from_element(1, 1, terminal_mu),
        ],
        back_rhs,
        |y| symmetrize(&mut y[0]),
    )?;
    let beta = ys.iter().map(|y| y[1][(0, 0)]).collect();
    let mu = ys.iter().map(|y| y[2][(0, 0)]).collect();
    let innovation_cost = ys.iter().map(|y| y[3][(0, 0)]).collect();
    let lambda = split(ys, ds, 0, dt);

    Ok(GaussianOffline {
        p,
        lambda,
        beta,
        mu,
        innovation_cost,
    })
}
