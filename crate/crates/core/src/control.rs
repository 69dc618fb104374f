//! Separation-principle controller and value-function evaluation.
//!
//! The optimal control is the classical LQ feedback on the filter mean,
//! `v̂ = −N⁻¹Gᵀπ(t)x̂(t)`. The cost of the non-Gaussian initial law enters
//! through two linear backward PDEs (n = d = 1):
//!
//! ```text
//! Z_t + (F − ΓH²)x Z_x + ΦH²(Φb + x) Z_ρ + ½(2a + Γ²H²) Z_xx + ½Φ²H² Z_ρρ − ΦH²Γ Z_xρ
//!     + πGN⁻¹Gπ x² + 2aπ = 0,                          Z(x,ρ,T) = 0
//! μ_t + Φ²H²b μ_ρ + ½Φ²H² μ_ρρ + MΓ + πH²Γ² = 0,       μ(ρ,T) = M_TΓ(ρ,T)
//! ```
//!
//! where Γ = Γ(ρ,t) and b = b(ρ,t). For a Gaussian law both collapse to the
//! closed forms Z = xᵀΛx + β and μ = μ(t).

use crate::density::{DensityKind, InitialDensity};
use crate::error::{Error, Result};
use crate::filter::FilterState;
use crate::linalg::{max_abs, trapezoid_weights, Mat, Vector};
use crate::model::LinearModel;
use crate::offline::{solve_gaussian_offline, GaussianOffline, OfflineSolution};
use crate::stats::tilted_moments;
use crate::zakai::GridDensity;

/// `v = −N⁻¹Gᵀπ_t x̂`.
pub fn lq_feedback(model: &LinearModel, pi_t: &Mat, xhat: &Vector) -> Vector {
    -(model.n_inv() * model.g().transpose() * pi_t * xhat)
}

/// Uniform axis `lo + i·step`, `i = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub step: f64,
    pub n: usize,
}

impl Axis {
    pub fn symmetric(half: f64, n: usize) -> Self {
        Self {
            lo: -half,
            step: 2.0 * half / (n - 1) as f64,
            n,
        }
    }
    pub fn at(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step
    }
    pub fn hi(&self) -> f64 {
        self.at(self.n - 1)
    }
    /// Cell index and fractional offset, clamped to the axis.
    fn locate(&self, x: f64) -> (usize, f64) {
        let pos = ((x - self.lo) / self.step).clamp(0.0, (self.n - 1) as f64);
        let i = (pos.floor() as usize).min(self.n - 2);
        (i, pos - i as f64)
    }
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi()
    }
}

/// Grid-solver settings shared by the Z and μ solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeOptions {
    pub x_cells: usize,
    pub rho_cells: usize,
    /// Half-width of the x axis; default `6·sqrt(max(Var q₀, max Σ))`.
    pub x_half: Option<f64>,
    /// Half-width of the ρ axis; default `6(|H|·max|Φ|·√T + max|S|·x_half)`.
    pub rho_half: Option<f64>,
    /// Keep every `store_stride`-th time slice of Z (plus t = 0 and T).
    pub store_stride: Option<usize>,
    /// Upper bound on CFL sub-steps per experiment step.
    pub max_substeps: usize,
}

impl Default for PdeOptions {
    fn default() -> Self {
        Self {
            x_cells: 201,
            rho_cells: 401,
            x_half: None,
            rho_half: None,
            store_stride: None,
            max_substeps: 10_000,
        }
    }
}

fn default_x_half(q0: &InitialDensity, offline: &OfflineSolution) -> Result<f64> {
    let var = q0.moments()?.covariance()[(0, 0)];
    let sig = offline
        .sigma_path()
        .values()
        .iter()
        .fold(0.0_f64, |m, s| m.max(s[(0, 0)]));
    Ok(6.0 * var.max(sig).sqrt())
}

fn default_rho_half(model: &LinearModel, offline: &OfflineSolution, x_half: f64) -> f64 {
    let h = model.h()[(0, 0)].abs();
    let phi = offline
        .phi_path()
        .values()
        .iter()
        .fold(0.0_f64, |m, p| m.max(max_abs(p)));
    let s = offline.s_path().values().iter().fold(0.0_f64, |m, p| m.max(max_abs(p)));
    6.0 * (h * phi * model.horizon().sqrt() + s * x_half)
}

/// The (x, ρ) axes the grid solvers use for these options.
pub fn pde_axes(
    model: &LinearModel,
    q0: &InitialDensity,
    offline: &OfflineSolution,
    opts: &PdeOptions,
) -> Result<(Axis, Axis)> {
    let xh = match opts.x_half {
        Some(v) => v,
        None => default_x_half(q0, offline)?,
    };
    let rh = opts.rho_half.unwrap_or_else(|| default_rho_half(model, offline, xh));
    let rh = if rh > 0.0 { rh } else { 1.0 };
    if opts.x_cells < 4 || opts.rho_cells < 3 {
        return Err(Error::ShapeMismatch {
            what: "PDE grid",
            expected: "x >= 4, rho >= 3 nodes".into(),
            found: format!("{}x{}", opts.x_cells, opts.rho_cells),
        });
    }
    Ok((Axis::symmetric(xh, opts.x_cells), Axis::symmetric(rh, opts.rho_cells)))
}

/// Time-dependent PDE coefficients at one instant.
struct Coeffs {
    phi: f64,
    pi: f64,
    gamma: Vec<f64>,
    b: Vec<f64>,
}

fn coeffs_at(q0: &InitialDensity, offline: &OfflineSolution, rho: &Axis, t: f64) -> Result<Coeffs> {
    let smp = offline.sample_at(t);
    let (sig, phi) = (smp.sigma[(0, 0)], smp.phi[(0, 0)]);
    let mut gamma = Vec::with_capacity(rho.n);
    let mut b = Vec::with_capacity(rho.n);
    for l in 0..rho.n {
        let tm = tilted_moments(q0, &smp.s, &Vector::from_element(1, rho.at(l)))?;
        gamma.push(sig + phi * phi * tm.cov[(0, 0)]);
        b.push(tm.b[0]);
    }
    Ok(Coeffs {
        phi,
        pi: smp.pi[(0, 0)],
        gamma,
        b,
    })
}

/// First derivative: central when the cell Péclet number is ≤ 1, upwind otherwise.
/// The sign convention is that of a backward equation `Z_t + u Z_x + D Z_xx = 0`.
#[inline]
fn first_diff(zm: f64, z0: f64, zp: f64, u: f64, d: f64, h: f64) -> f64 {
    if u.abs() * h <= 2.0 * d {
        (zp - zm) / (2.0 * h)
    } else if u > 0.0 {
        (zp - z0) / h
    } else {
        (z0 - zm) / h
    }
}

struct ScalarModel {
    f: f64,
    h2: f64,
    a: f64,
    cw: f64,
    m: f64,
    m_t: f64,
}

impl ScalarModel {
    fn new(model: &LinearModel) -> Self {
        Self {
            f: model.f()[(0, 0)],
            h2: model.obs_weight()[(0, 0)],
            a: model.a()[(0, 0)],
            cw: model.control_weight()[(0, 0)],
            m: model.m()[(0, 0)],
            m_t: model.m_t()[(0, 0)],
        }
    }
}

/// Z on a (x, ρ) grid, stored at a subset of time indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ZGrid {
    pub x: Axis,
    pub rho: Axis,
    /// Time indices of the stored slices, increasing.
    pub indices: Vec<usize>,
    /// `slices[s][l·nx + i] = Z(x_i, ρ_l, t_{indices[s]})`.
    pub slices: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ZField {
    /// `Z(x, ρ, t) = xᵀΛ(t)x + β(t)`.
    Gaussian(GaussianOffline),
    Grid(ZGrid),
}

impl ZGrid {
    fn slice(&self, k: usize) -> Result<&[f64]> {
        self.indices
            .binary_search(&k)
            .map(|s| self.slices[s].as_slice())
            .map_err(|_| Error::MissingSlice { index: k })
    }

    fn node(&self, z: &[f64], i: usize, l: usize) -> f64 {
        z[l * self.x.n + i]
    }

    fn dx_node(&self, z: &[f64], i: usize, l: usize) -> f64 {
        let nx = self.x.n;
        let h = self.x.step;
        if i == 0 {
            (self.node(z, 1, l) - self.node(z, 0, l)) / h
        } else if i == nx - 1 {
            (self.node(z, nx - 1, l) - self.node(z, nx - 2, l)) / h
        } else {
            (self.node(z, i + 1, l) - self.node(z, i - 1, l)) / (2.0 * h)
        }
    }

    fn dxx_node(&self, z: &[f64], i: usize, l: usize) -> f64 {
        let i = i.clamp(1, self.x.n - 2);
        (self.node(z, i + 1, l) - 2.0 * self.node(z, i, l) + self.node(z, i - 1, l)) / (self.x.step * self.x.step)
    }

    fn dr_node(&self, z: &[f64], i: usize, l: usize) -> f64 {
        let nr = self.rho.n;
        let h = self.rho.step;
        if l == 0 {
            (self.node(z, i, 1) - self.node(z, i, 0)) / h
        } else if l == nr - 1 {
            (self.node(z, i, nr - 1) - self.node(z, i, nr - 2)) / h
        } else {
            (self.node(z, i, l + 1) - self.node(z, i, l - 1)) / (2.0 * h)
        }
    }

    fn bilinear(&self, x: f64, rho: f64, f: impl Fn(usize, usize) -> f64) -> f64 {
        let (i, s) = self.x.locate(x);
        let (l, r) = self.rho.locate(rho);
        (1.0 - s) * (1.0 - r) * f(i, l)
            + s * (1.0 - r) * f(i + 1, l)
            + (1.0 - s) * r * f(i, l + 1)
            + s * r * f(i + 1, l + 1)
    }
}

impl ZField {
    pub fn is_gaussian(&self) -> bool {
        matches!(self, ZField::Gaussian(_))
    }

    /// Time indices at which the field can be evaluated; `None` means all.
    pub fn stored_indices(&self) -> Option<&[usize]> {
        match self {
            ZField::Gaussian(_) => None,
            ZField::Grid(g) => Some(&g.indices),
        }
    }

    pub fn value(&self, k: usize, x: f64, rho: f64) -> Result<f64> {
        match self {
            ZField::Gaussian(g) => Ok(g.lambda(k)[(0, 0)] * x * x + g.beta(k)),
            ZField::Grid(g) => {
                let z = g.slice(k)?;
                Ok(g.bilinear(x, rho, |i, l| g.node(z, i, l)))
            }
        }
    }

    pub fn d_x(&self, k: usize, x: f64, rho: f64) -> Result<f64> {
        match self {
            ZField::Gaussian(g) => Ok(2.0 * g.lambda(k)[(0, 0)] * x),
            ZField::Grid(g) => {
                let z = g.slice(k)?;
                Ok(g.bilinear(x, rho, |i, l| g.dx_node(z, i, l)))
            }
        }
    }

    pub fn d_xx(&self, k: usize, x: f64, rho: f64) -> Result<f64> {
        match self {
            ZField::Gaussian(g) => Ok(2.0 * g.lambda(k)[(0, 0)]),
            ZField::Grid(g) => {
                let z = g.slice(k)?;
                Ok(g.bilinear(x, rho, |i, l| g.dxx_node(z, i, l)))
            }
        }
    }

    pub fn d_rho(&self, k: usize, x: f64, rho: f64) -> Result<f64> {
        match self {
            ZField::Gaussian(_) => Ok(0.0),
            ZField::Grid(g) => {
                let z = g.slice(k)?;
                Ok(g.bilinear(x, rho, |i, l| g.dr_node(z, i, l)))
            }
        }
    }
}

fn extrapolate_edges(z: &mut [f64], nx: usize, nr: usize) {
    for l in 1..nr - 1 {
        let row = &mut z[l * nx..(l + 1) * nx];
        row[0] = 3.0 * row[1] - 3.0 * row[2] + row[3];
        row[nx - 1] = 3.0 * row[nx - 2] - 3.0 * row[nx - 3] + row[nx - 4];
    }
    for i in 0..nx {
        z[i] = 2.0 * z[nx + i] - z[2 * nx + i];
        z[(nr - 1) * nx + i] = 2.0 * z[(nr - 2) * nx + i] - z[(nr - 3) * nx + i];
    }
}

/// Backward generator plus source of the Z equation at interior nodes.
fn z_operator(z: &[f64], out: &mut [f64], sm: &ScalarModel, c: &Coeffs, xa: &Axis, ra: &Axis) {
    let (nx, nr) = (xa.n, ra.n);
    let (hx, hr) = (xa.step, ra.step);
    let d_r = 0.5 * c.phi * c.phi * sm.h2;
    let src2 = c.pi * c.pi * sm.cw;
    let src0 = 2.0 * sm.a * c.pi;
    for l in 1..nr - 1 {
        let g = c.gamma[l];
        let ux_coef = sm.f - g * sm.h2;
        let d_x = 0.5 * (2.0 * sm.a + g * g * sm.h2);
        let cross = -c.phi * sm.h2 * g;
        let pb = c.phi * c.b[l];
        for i in 1..nx - 1 {
            let x = xa.at(i);
            let at = |ii: usize, ll: usize| z[ll * nx + ii];
            let z0 = at(i, l);
            let (zxm, zxp) = (at(i - 1, l), at(i + 1, l));
            let (zrm, zrp) = (at(i, l - 1), at(i, l + 1));
            let ux = ux_coef * x;
            let ur = c.phi * sm.h2 * (pb + x);
            let zx = first_diff(zxm, z0, zxp, ux, d_x, hx);
            let zr = first_diff(zrm, z0, zrp, ur, d_r, hr);
            let zxx = (zxp - 2.0 * z0 + zxm) / (hx * hx);
            let zrr = (zrp - 2.0 * z0 + zrm) / (hr * hr);
            let zxr = (at(i + 1, l + 1) - at(i + 1, l - 1) - at(i - 1, l + 1) + at(i - 1, l - 1)) / (4.0 * hx * hr);
            out[l * nx + i] = ux * zx + d_x * zxx + ur * zr + d_r * zrr + cross * zxr + src2 * x * x + src0;
        }
    }
}

fn z_rate(sm: &ScalarModel, c: &Coeffs, xa: &Axis, ra: &Axis) -> f64 {
    let (hx, hr) = (xa.step, ra.step);
    let xm = xa.hi().abs().max(xa.lo.abs());
    let d_r = 0.5 * c.phi * c.phi * sm.h2;
    let mut rate: f64 = 0.0;
    for l in 0..ra.n {
        let g = c.gamma[l];
        let d_x = 0.5 * (2.0 * sm.a + g * g * sm.h2);
        let ux = ((sm.f - g * sm.h2) * xm).abs();
        let ur = (c.phi * sm.h2).abs() * ((c.phi * c.b[l]).abs() + xm);
        let cross = (c.phi * sm.h2 * g).abs();
        rate = rate.max(2.0 * d_x / (hx * hx) + 2.0 * d_r / (hr * hr) + cross / (hx * hr) + ux / hx + ur / hr);
    }
    rate
}

fn substeps(rate: f64, dt: f64, cap: usize) -> Result<usize> {
    let limit = 0.5 / rate.max(1e-300);
    let m = (dt / limit).ceil().max(1.0);
    if m > cap as f64 {
        return Err(Error::CflViolation { dt, limit });
    }
    Ok(m as usize)
}

/// Solves the Z equation on a grid regardless of the law's kind.
pub fn solve_z_grid(
    model: &LinearModel,
    q0: &InitialDensity,
    offline: &OfflineSolution,
    opts: &PdeOptions,
) -> Result<ZGrid> {
    model.require_scalar("Z grid solver needs n = m = d = 1")?;
    let (xa, ra) = pde_axes(model, q0, offline, opts)?;
    let sm = ScalarModel::new(model);
    let grid = offline.grid();
    let n_steps = grid.n_steps();
    let stride = opts.store_stride.unwrap_or_else(|| n_steps.div_ceil(100)).max(1);
    let size = xa.n * ra.n;
    let mut z = vec![0.0; size];
    let mut stage = vec![0.0; size];
    let mut k1 = vec![0.0; size];
    let mut k2 = vec![0.0; size];
    let mut indices = vec![n_steps];
    let mut slices = vec![z.clone()];
    let mut c_hi = coeffs_at(q0, offline, &ra, grid.t(n_steps))?;
    for k in (0..n_steps).rev() {
        let (t_hi, t_lo) = (grid.t(k + 1), grid.t(k));
        let c_lo = coeffs_at(q0, offline, &ra, t_lo)?;
        let rate = z_rate(&sm, &c_hi, &xa, &ra).max(z_rate(&sm, &c_lo, &xa, &ra));
        let m = substeps(rate, t_hi - t_lo, opts.max_substeps)?;
        let h = (t_hi - t_lo) / m as f64;
        let mut c_a = c_hi;
        for j in 0..m {
            let c_b = if j + 1 == m {
                coeffs_at(q0, offline, &ra, t_lo)?
            } else {
                coeffs_at(q0, offline, &ra, t_hi - (j + 1) as f64 * h)?
            };
            z_operator(&z, &mut k1, &sm, &c_a, &xa, &ra);
            for p in 0..size {
                stage[p] = z[p] + h * k1[p];
            }
            extrapolate_edges(&mut stage, xa.n, ra.n);
            z_operator(&stage, &mut k2, &sm, &c_b, &xa, &ra);
            for p in 0..size {
                z[p] += 0.5 * h * (k1[p] + k2[p]);
            }
            extrapolate_edges(&mut z, xa.n, ra.n);
            c_a = c_b;
        }
        c_hi = c_lo;
        if k % stride == 0 {
            indices.push(k);
            slices.push(z.clone());
        }
    }
    indices.reverse();
    slices.reverse();
    Ok(ZGrid {
        x: xa,
        rho: ra,
        indices,
        slices,
    })
}

/// Z field: closed form for a Gaussian law, grid solution otherwise.
///
/// With `verify`, a Gaussian law is also solved on the grid and the two are
/// required to agree to `1e-3·(1 + |Z|)`.
pub fn solve_z_1d(
    model: &LinearModel,
    q0: &InitialDensity,
    offline: &OfflineSolution,
    opts: &PdeOptions,
    verify: bool,
) -> Result<ZField> {
    if let Some((_, p0)) = q0.gaussian_params() {
        let g = solve_gaussian_offline(model, offline.grid(), offline, p0)?;
        if verify {
            let grid = solve_z_grid(model, q0, offline, opts)?;
            let mut worst: f64 = 0.0;
            for (s, &k) in grid.indices.iter().enumerate() {
                let (lam, beta) = (g.lambda(k)[(0, 0)], g.beta(k));
                for l in 0..grid.rho.n {
                    for i in 0..grid.x.n {
                        let x = grid.x.at(i);
                        let exact = lam * x * x + beta;
                        let err = (grid.slices[s][l * grid.x.n + i] - exact).abs() / (1.0 + exact.abs());
                        worst = worst.max(err);
                    }
                }
            }
            if worst > 1e-3 {
                return Err(Error::IdentityViolation {
                    what: "Z grid vs closed form",
                    residual: worst,
                    tolerance: 1e-3,
                });
            }
        }
        return Ok(ZField::Gaussian(g));
    }
    Ok(ZField::Grid(solve_z_grid(model, q0, offline, opts)?))
}

#[derive(Debug, Clone, PartialEq)]
pub enum MuField {
    /// μ(t), independent of ρ.
    Gaussian(Vec<f64>),
    /// `values[k][l] = μ(ρ_l, t_k)` at every time index.
    Grid { rho: Axis, values: Vec<Vec<f64>> },
}

impl MuField {
    pub fn value(&self, k: usize, rho: f64) -> f64 {
        match self {
            MuField::Gaussian(mu) => mu[k],
            MuField::Grid { rho: ra, values } => {
                let (l, r) = ra.locate(rho);
                (1.0 - r) * values[k][l] + r * values[k][l + 1]
            }
        }
    }
}

fn mu_operator(mu: &[f64], out: &mut [f64], sm: &ScalarModel, c: &Coeffs, ra: &Axis) {
    let h = ra.step;
    let d = 0.5 * c.phi * c.phi * sm.h2;
    for l in 1..ra.n - 1 {
        let u = c.phi * c.phi * sm.h2 * c.b[l];
        let g = c.gamma[l];
        let d1 = first_diff(mu[l - 1], mu[l], mu[l + 1], u, d, h);
        let d2 = (mu[l + 1] - 2.0 * mu[l] + mu[l - 1]) / (h * h);
        out[l] = u * d1 + d * d2 + sm.m * g + c.pi * sm.h2 * g * g;
    }
}

fn mu_edges(mu: &mut [f64]) {
    let n = mu.len();
    mu[0] = 2.0 * mu[1] - mu[2];
    mu[n - 1] = 2.0 * mu[n - 2] - mu[n - 3];
}

/// μ field: closed form for a Gaussian law, grid solution otherwise.
pub fn solve_mu_1d(
    model: &LinearModel,
    q0: &InitialDensity,
    offline: &OfflineSolution,
    opts: &PdeOptions,
) -> Result<MuField> {
    let grid = offline.grid();
    if let Some((_, p0)) = q0.gaussian_params() {
        let g = solve_gaussian_offline(model, grid, offline, p0)?;
        return Ok(MuField::Gaussian((0..=grid.n_steps()).map(|k| g.mu(k)).collect()));
    }
    solve_mu_grid(model, q0, offline, opts)
}

pub fn solve_mu_grid(
    model: &LinearModel,
    q0: &InitialDensity,
    offline: &OfflineSolution,
    opts: &PdeOptions,
) -> Result<MuField> {
    model.require_scalar("mu grid solver needs n = m = d = 1")?;
    let (_, ra) = pde_axes(model, q0, offline, opts)?;
    let sm = ScalarModel::new(model);
    let grid = offline.grid();
    let n_steps = grid.n_steps();
    let mut c_hi = coeffs_at(q0, offline, &ra, grid.t(n_steps))?;
    let mut mu: Vec<f64> = c_hi.gamma.iter().map(|g| sm.m_t * g).collect();
    let mut values = vec![mu.clone()];
    let (mut k1, mut k2, mut stage) = (vec![0.0; ra.n], vec![0.0; ra.n], vec![0.0; ra.n]);
    for k in (0..n_steps).rev() {
        let (t_hi, t_lo) = (grid.t(k + 1), grid.t(k));
        let c_lo = coeffs_at(q0, offline, &ra, t_lo)?;
        let rate = [&c_hi, &c_lo]
            .iter()
            .map(|c| {
                let d = 0.5 * c.phi * c.phi * sm.h2;
                let u =
                    c.b.iter()
                        .fold(0.0_f64, |m, b| m.max((c.phi * c.phi * sm.h2 * b).abs()));
                2.0 * d / (ra.step * ra.step) + u / ra.step
            })
            .fold(0.0_f64, f64::max);
        let m = substeps(rate, t_hi - t_lo, opts.max_substeps)?;
        let h = (t_hi - t_lo) / m as f64;
        let mut c_a = c_hi;
        for j in 0..m {
            let c_b = if j + 1 == m {
                coeffs_at(q0, offline, &ra, t_lo)?
            } else {
                coeffs_at(q0, offline, &ra, t_hi - (j + 1) as f64 * h)?
            };
            mu_operator(&mu, &mut k1, &sm, &c_a, &ra);
            for l in 0..ra.n {
                stage[l] = mu[l] + h * k1[l];
            }
            mu_edges(&mut stage);
            mu_operator(&stage, &mut k2, &sm, &c_b, &ra);
            for l in 0..ra.n {
                mu[l] += 0.5 * h * (k1[l] + k2[l]);
            }
            mu_edges(&mut mu);
            c_a = c_b;
        }
        c_hi = c_lo;
        values.push(mu.clone());
    }
    values.reverse();
    Ok(MuField::Grid { rho: ra, values })
}

/// `∫D_xZ(x − x̂, ρ, t) q(x,t) dx / (ν(1 + max|D_xZ|))`, which vanishes for the
/// exact solution.
pub fn hjb_residual(z: &ZField, k: usize, q_t: &GridDensity, state: &FilterState) -> Result<f64> {
    let xs = q_t.nodes();
    let w = trapezoid_weights(&xs);
    let (xhat, rho) = (state.xhat[0], state.rho[0]);
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for ((x, wi), q) in xs.iter().zip(&w).zip(q_t.values()) {
        let d = z.d_x(k, x - xhat, rho)?;
        max = max.max(d.abs());
        sum += d * q * wi;
    }
    Ok(sum / (state.nu() * (1.0 + max)))
}

/// `K(x,t) = H[−Γ D_xZ + Φ D_ρZ](x − x̂, ρ, t)`.
pub fn k_field(
    z: &ZField,
    state: &FilterState,
    model: &LinearModel,
    q0: &InitialDensity,
    offline: &OfflineSolution,
    x: f64,
) -> Result<f64> {
    let k = state.t_index;
    let h = model.h()[(0, 0)];
    let e = x - state.xhat[0];
    match z {
        ZField::Gaussian(g) => Ok(-2.0 * h * g.p(k)[(0, 0)] * g.lambda(k)[(0, 0)] * e),
        ZField::Grid(_) => {
            let gamma = crate::filter::filter_gamma(state, q0, offline)?[(0, 0)];
            let phi = offline.phi(k)[(0, 0)];
            let rho = state.rho[0];
            Ok(h * (-gamma * z.d_x(k, e, rho)? + phi * z.d_rho(k, e, rho)?))
        }
    }
}

/// `Φ(q₀, 0) = (x̄ᵀπ(0)x̄ + μ(0, 0))·∫q₀`.
pub fn value_function(q0: &InitialDensity, offline: &OfflineSolution, mu: &MuField) -> Result<f64> {
    let m = q0.moments()?;
    Ok((m.mean.dot(&(offline.pi(0) * &m.mean)) + mu.value(0, 0.0)) * m.mass)
}

/// `∂Φ(q,0)/∂q(x) = xᵀπ(0)x + Z(x − x̄, 0, 0)`.
pub fn value_q_derivative(x: &Vector, q0: &InitialDensity, offline: &OfflineSolution, z: &ZField) -> Result<f64> {
    let mean = q0.moments()?.mean;
    let e = x - &mean;
    let base = x.dot(&(offline.pi(0) * x));
    match z {
        ZField::Gaussian(g) => Ok(base + e.dot(&(g.lambda(0) * &e)) + g.beta(0)),
        ZField::Grid(_) => Ok(base + z.value(0, e[0], 0.0)?),
    }
}

/// Time derivative of the value at t = 0 by quadrature against q₀, with the
/// Gaussian closed form alongside when it applies.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTimeDerivative {
    pub quadrature: f64,
    pub closed_form: Option<f64>,
    /// Set when both are available and differ by more than `1e-6·(1 + |quadrature|)`.
    pub disagreement: bool,
}

fn quadrature_nodes(q0: &InitialDensity) -> Result<(Vec<f64>, Vec<f64>)> {
    match q0.kind() {
        DensityKind::Grid1d { nodes, values } => Ok((nodes.clone(), values.clone())),
        _ => {
            let m = q0.moments()?;
            let sd = m.covariance()[(0, 0)].sqrt();
            let spread = q0.components().iter().fold(0.0_f64, |acc, (_, c)| {
                acc.max((c.mean()[0] - m.mean[0]).abs() + 12.0 * c.cov()[(0, 0)].sqrt())
            });
            let half = spread.max(12.0 * sd);
            let n = 8001;
            let xs: Vec<f64> = (0..n)
                .map(|i| m.mean[0] - half + 2.0 * half * i as f64 / (n - 1) as f64)
                .collect();
            let qs = xs.iter().map(|&x| q0.pdf_1d(x)).collect();
            Ok((xs, qs))
        }
    }
}

pub fn value_t_derivative(
    q0: &InitialDensity,
    model: &LinearModel,
    offline: &OfflineSolution,
    z: &ZField,
) -> Result<ValueTimeDerivative> {
    model.require_scalar("value time derivative quadrature needs n = m = d = 1")?;
    let sm = ScalarModel::new(model);
    let (g, n) = (model.g()[(0, 0)], model.n()[(0, 0)]);
    let h = model.h()[(0, 0)];
    let mom = q0.moments()?;
    let xbar = mom.mean[0];
    let pi0 = offline.pi(0)[(0, 0)];
    let vhat = lq_feedback(model, offline.pi(0), &mom.mean)[0];
    let state = FilterState {
        t_index: 0,
        xhat: mom.mean.clone(),
        rho: Vector::zeros(1),
        log_nu: mom.mass.ln(),
    };
    let (xs, qs) = quadrature_nodes(q0)?;
    let w = trapezoid_weights(&xs);
    let mut total = 0.0;
    for ((&x, &q), wi) in xs.iter().zip(&qs).zip(&w) {
        let e = x - xbar;
        let ux = 2.0 * pi0 * x + z.d_x(0, e, 0.0)?;
        let uxx = 2.0 * pi0 + z.d_xx(0, e, 0.0)?;
        let kf = k_field(z, &state, model, q0, offline, x)?;
        let running = sm.m * x * x + n * vhat * vhat + ux * (sm.f * x + g * vhat);
        total += -(sm.a * uxx + 0.5 * h * x * kf + running) * q * wi;
    }
    let closed_form = match z {
        ZField::Gaussian(gz) => {
            let p0 = gz.p(0)[(0, 0)];
            let lam0 = gz.lambda(0)[(0, 0)];
            let pidot = offline.pi_dot(0)[(0, 0)];
            let per_mass =
                -2.0 * (sm.a + p0 * sm.f) * (pi0 + lam0) + xbar * pidot * xbar - p0 * sm.m + p0 * sm.h2 * p0 * lam0;
            Some(per_mass * mom.mass)
        }
        ZField::Grid(_) => None,
    };
    let disagreement = closed_form.is_some_and(|c| (c - total).abs() > 1e-6 * (1.0 + total.abs()));
    Ok(ValueTimeDerivative {
        quadrature: total,
        closed_form,
        disagreement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;
    use crate::offline::solve_offline;

    fn sc1() -> LinearModel {
        LinearModel::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap()
    }

    fn setup(model: &LinearModel, steps: usize) -> OfflineSolution {
        solve_offline(model, &TimeGrid::for_model(model, steps).unwrap()).unwrap()
    }

    fn bimodal() -> InitialDensity {
        InitialDensity::mixture_1d(&[(0.5, -1.0, 0.25), (0.5, 1.0, 0.25)]).unwrap()
    }

    #[test]
    fn feedback_examples() {
        let model = sc1();
        let x = Vector::from_element(1, 2.0);
        assert_eq!(lq_feedback(&model, &Mat::zeros(1, 1), &x)[0], 0.0);
        let v = lq_feedback(&model, &Mat::from_element(1, 1, 1f64.tanh()), &x)[0];
        assert!((v + 1.523188).abs() < 1e-6);
        assert_eq!(
            lq_feedback(&model, &Mat::from_element(1, 1, 0.7), &Vector::zeros(1))[0],
            0.0
        );
    }

    #[test]
    fn gaussian_z_matches_grid() {
        let model = sc1();
        let off = setup(&model, 200);
        let q = InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap();
        let opts = PdeOptions {
            x_cells: 101,
            rho_cells: 41,
            ..PdeOptions::default()
        };
        let z = solve_z_1d(&model, &q, &off, &opts, true).unwrap();
        assert!(z.is_gaussian());
        assert_eq!(z.value(200, 1.3, 0.4).unwrap(), 0.0);
        let grid = solve_z_grid(&model, &q, &off, &opts).unwrap();
        assert!(grid.slices.last().unwrap().iter().all(|&v| v == 0.0));
        let zg = ZField::Grid(grid);
        let a = zg.value(0, 0.5, 1.0).unwrap();
        let b = zg.value(0, 0.5, -3.0).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn zero_cost_gives_zero_fields() {
        let model = LinearModel::scalar(0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let off = setup(&model, 100);
        let opts = PdeOptions {
            x_cells: 41,
            rho_cells: 41,
            ..PdeOptions::default()
        };
        let z = solve_z_grid(&model, &bimodal(), &off, &opts).unwrap();
        assert!(z.slices.iter().flatten().all(|&v| v == 0.0));
        let mu = solve_mu_1d(&model, &bimodal(), &off, &opts).unwrap();
        assert_eq!(mu.value(0, 0.0), 0.0);
        let zf = ZField::Grid(z);
        assert_eq!(
            value_q_derivative(&Vector::from_element(1, 0.8), &bimodal(), &off, &zf).unwrap(),
            0.0
        );
        let vt = value_t_derivative(&bimodal(), &model, &off, &zf).unwrap();
        assert_eq!(vt.quadrature, 0.0);
    }

    #[test]
    fn gaussian_value_function() {
        let model = sc1();
        let off = setup(&model, 1000);
        let q = InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap();
        let mu = solve_mu_1d(&model, &q, &off, &PdeOptions::default()).unwrap();
        let v = value_function(&q, &off, &mu).unwrap();
        assert!((v - (1.0 + 1f64.cosh().ln())).abs() < 1e-8);
        let q2 = InitialDensity::gaussian_1d(0.0, 1.0, 2.0).unwrap();
        let v2 = value_function(
            &q2,
            &off,
            &solve_mu_1d(&model, &q2, &off, &PdeOptions::default()).unwrap(),
        )
        .unwrap();
        assert!((v2 - 2.0 * v).abs() < 1e-12);
    }

    #[test]
    fn mixture_mu_matches_z_identity() {
        // μ(0,0) = tr(π(0)Cov₀) + E_q₀[Z(x − x̄, 0, 0)]
        let model = sc1();
        let off = setup(&model, 200);
        let q = bimodal();
        let opts = PdeOptions::default();
        let mu = solve_mu_1d(&model, &q, &off, &opts).unwrap();
        let z = ZField::Grid(solve_z_grid(&model, &q, &off, &opts).unwrap());
        let (xs, qs) = quadrature_nodes(&q).unwrap();
        let w = trapezoid_weights(&xs);
        let mut ez = 0.0;
        for ((x, qv), wi) in xs.iter().zip(&qs).zip(&w) {
            ez += z.value(0, *x, 0.0).unwrap() * qv * wi;
        }
        let rhs = off.pi(0)[(0, 0)] * 1.25 + ez;
        let lhs = mu.value(0, 0.0);
        assert!((lhs - rhs).abs() < 1e-2 * lhs.abs(), "{lhs} vs {rhs}");
    }

    #[test]
    fn gaussian_derivatives() {
        let model = LinearModel::scalar(0.2, 1.0, 0.8, 0.9, 1.0, 0.5, 0.4, 1.0).unwrap();
        let off = setup(&model, 1000);
        let q = InitialDensity::gaussian_1d(0.3, 0.7, 1.0).unwrap();
        let z = solve_z_1d(&model, &q, &off, &PdeOptions::default(), false).unwrap();
        let ZField::Gaussian(g) = &z else { panic!() };
        let x = Vector::from_element(1, -0.4);
        let d = value_q_derivative(&x, &q, &off, &z).unwrap();
        let expect = off.pi(0)[(0, 0)] * 0.16 + g.lambda(0)[(0, 0)] * 0.49 + g.beta(0);
        assert!((d - expect).abs() < 1e-12);
        let vt = value_t_derivative(&q, &model, &off, &z).unwrap();
        assert!(!vt.disagreement, "{vt:?}");

        let state = FilterState {
            t_index: 0,
            xhat: Vector::from_element(1, 0.3),
            rho: Vector::zeros(1),
            log_nu: 0.0,
        };
        assert_eq!(k_field(&z, &state, &model, &q, &off, 0.3).unwrap(), 0.0);
        let end = FilterState { t_index: 1000, ..state };
        assert_eq!(k_field(&z, &end, &model, &q, &off, 1.7).unwrap(), 0.0);

        // Finite difference across start times.
        let delta = 1e-3;
        let value = |horizon: f64| {
            let m = model.with_horizon(horizon).unwrap();
            let o = solve_offline(&m, &TimeGrid::for_model(&m, 1000).unwrap()).unwrap();
            value_function(&q, &o, &solve_mu_1d(&m, &q, &o, &PdeOptions::default()).unwrap()).unwrap()
        };
        let fd = (value(1.0 - delta) - value(1.0)) / delta;
        assert!(
            (fd - vt.quadrature).abs() <= 1e-2 * fd.abs(),
            "{fd} vs {}",
            vt.quadrature
        );
    }

    #[test]
    fn hjb_residual_gaussian_is_tiny() {
        let model = sc1();
        let off = setup(&model, 100);
        let q = InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap();
        let z = solve_z_1d(&model, &q, &off, &PdeOptions::default(), false).unwrap();
        let mut state = crate::filter::init_filter(&q).unwrap();
        for k in 0..100 {
            let dz = Vector::from_element(1, 0.02 * ((k as f64) * 0.3).sin());
            state = crate::filter::step_filter(&state, &model, &off, &q, &Vector::zeros(1), &dz, 0.01).unwrap();
            let xs: Vec<f64> = (0..2001).map(|i| state.xhat[0] - 10.0 + 0.01 * i as f64).collect();
            let dens = crate::filter::makowsky_density_1d(&state, &q, &off, &xs).unwrap();
            let qt = GridDensity::from_values(xs[0], 0.01, dens).unwrap();
            assert!(hjb_residual(&z, state.t_index, &qt, &state).unwrap().abs() <= 1e-10);
        }
    }
}
