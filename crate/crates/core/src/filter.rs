//! Sufficient-statistics filter.
//!
//! The unnormalized conditional density is carried by three statistics:
//! the conditional mean x̂, the auxiliary statistic ρ and the log-mass log ν.
//! Given (x̂, ρ, ν) and the offline paths, the whole density has the closed
//! form
//!
//! ```text
//! q(x,t) = ν · law of  Φ(t)y + x̂ − Φ(t)b + N(0, Σ(t)),   y ~ q₀ tilted by exp(−½yᵀSy + yᵀρ)
//! ```

use num_complex::Complex64;

use crate::density::{DensityKind, InitialDensity};
use crate::error::{Error, Result};
use crate::linalg::{spd_inverse_logdet, Mat, Vector};
use crate::model::LinearModel;
use crate::offline::OfflineSolution;
use crate::stats::{gamma_from, tilted_law, tilted_moments};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub t_index: usize,
    pub xhat: Vector,
    pub rho: Vector,
    pub log_nu: f64,
}

impl FilterState {
    pub fn nu(&self) -> f64 {
        self.log_nu.exp()
    }
}

pub fn init_filter(q0: &InitialDensity) -> Result<FilterState> {
    let m = q0.moments()?;
    if !(m.mass > 0.0) {
        return Err(Error::ZeroMass);
    }
    Ok(FilterState {
        t_index: 0,
        rho: Vector::zeros(m.mean.len()),
        xhat: m.mean,
        log_nu: m.mass.ln(),
    })
}

/// Γ(ρ,t) at the state's time index.
pub fn filter_gamma(state: &FilterState, q0: &InitialDensity, offline: &OfflineSolution) -> Result<Mat> {
    let k = state.t_index;
    let tm = tilted_moments(q0, offline.s(k), &state.rho)?;
    Ok(gamma_from(&tm, offline.sigma(k), offline.phi(k)))
}

/// Time-stepping scheme for the statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// Plain Euler–Maruyama on x̂ and ρ, exact exponential on ν.
    EulerMaruyama,
    /// Euler–Maruyama plus the second-order Itô terms `½(L^jσ_l)(dz_j dz_l − δ_jl dt)`.
    ///
    /// The noise coefficient of log ν is Hx̂ and that of x̂ is Γ(ρ)Hᵀ, so both
    /// pick up a correction; Lévy areas are dropped when d > 1. Euler alone
    /// leaves an O(√dt) pathwise error in ν that is visible against the
    /// oracles, which weight by the exact likelihood.
    #[default]
    Milstein,
}

/// One step of `scheme`. Also returns Γ evaluated at the starting state.
#[allow(clippy::too_many_arguments)]
pub fn step_filter_with_gamma(
    state: &FilterState,
    model: &LinearModel,
    offline: &OfflineSolution,
    q0: &InitialDensity,
    v: &Vector,
    dz: &Vector,
    dt: f64,
    scheme: Scheme,
) -> Result<(FilterState, Mat)> {
    let k = state.t_index;
    let phi = offline.phi(k);
    let law = tilted_law(q0, offline.s(k), &state.rho)?;
    let tm = law.moments();
    let gamma = gamma_from(&tm, offline.sigma(k), phi);
    let h = model.h();
    let hx = h * &state.xhat;
    let innov = dz - &hx * dt;
    let mut xhat = &state.xhat + (model.f() * &state.xhat + model.g() * v) * dt + &gamma * h.transpose() * &innov;
    let beta = &state.xhat - phi * &tm.b;
    let rho = &state.rho + phi.transpose() * h.transpose() * (dz - h * beta * dt);
    let mut log_nu = state.log_nu + hx.dot(dz) - 0.5 * hx.norm_squared() * dt;
    if scheme == Scheme::Milstein {
        let d = dz.len();
        // I_jl ≈ ½(dz_j dz_l − δ_jl dt)
        let mut iml = dz * dz.transpose() * 0.5;
        for j in 0..d {
            iml[(j, j)] -= 0.5 * dt;
        }
        log_nu += (h * &gamma * h.transpose()).component_mul(&iml).sum();
        // dΓ along the ρ noise column ΦᵀHᵀe_j.
        let u = phi.transpose() * h.transpose();
        for j in 0..d {
            let dgamma = phi * law.cov_derivative(&u.column(j).into_owned()) * phi.transpose();
            xhat += dgamma * h.transpose() * iml.column(j);
        }
    }
    Ok((
        FilterState {
            t_index: k + 1,
            xhat,
            rho,
            log_nu,
        },
        gamma,
    ))
}

/// One Euler–Maruyama step.
pub fn step_filter(
    state: &FilterState,
    model: &LinearModel,
    offline: &OfflineSolution,
    q0: &InitialDensity,
    v: &Vector,
    dz: &Vector,
    dt: f64,
) -> Result<FilterState> {
    step_filter_with_gamma(state, model, offline, q0, v, dz, dt, Scheme::EulerMaruyama).map(|(s, _)| s)
}

/// One step of the second-order scheme.
pub fn step_filter_milstein(
    state: &FilterState,
    model: &LinearModel,
    offline: &OfflineSolution,
    q0: &InitialDensity,
    v: &Vector,
    dz: &Vector,
    dt: f64,
) -> Result<FilterState> {
    step_filter_with_gamma(state, model, offline, q0, v, dz, dt, Scheme::Milstein).map(|(s, _)| s)
}

/// (ν, mean, covariance) of the closed-form unnormalized conditional density.
pub fn makowsky_moments(
    state: &FilterState,
    q0: &InitialDensity,
    offline: &OfflineSolution,
) -> Result<(f64, Vector, Mat)> {
    Ok((state.nu(), state.xhat.clone(), filter_gamma(state, q0, offline)?))
}

/// `∫ exp(iλᵀx) q(x,t) dx`.
pub fn characteristic_function(
    state: &FilterState,
    q0: &InitialDensity,
    offline: &OfflineSolution,
    lambda: &Vector,
) -> Result<Complex64> {
    let k = state.t_index;
    let phi = offline.phi(k);
    let law = tilted_law(q0, offline.s(k), &state.rho)?;
    let b = law.moments().b;
    let shift = lambda.dot(&(&state.xhat - phi * b));
    let damp = -0.5 * lambda.dot(&(offline.sigma(k) * lambda));
    let ratio = law.characteristic(&(phi.transpose() * lambda));
    Ok(Complex64::new(state.log_nu + damp, shift).exp() * ratio)
}

/// `log θ(x,t) = log ν − ½xᵀSx + xᵀρ − log ∫exp(−½yᵀSy + yᵀρ)q₀(y)dy`.
pub fn log_theta_weight(
    state: &FilterState,
    q0: &InitialDensity,
    offline: &OfflineSolution,
    x: &Vector,
) -> Result<f64> {
    let s = offline.s(state.t_index);
    let law = tilted_law(q0, s, &state.rho)?;
    Ok(state.log_nu - 0.5 * x.dot(&(s * x)) + x.dot(&state.rho) - law.log_normalizer())
}

/// θ(x,t); `Underflow` carries the log value when it is not representable.
pub fn theta_weight(state: &FilterState, q0: &InitialDensity, offline: &OfflineSolution, x: &Vector) -> Result<f64> {
    let l = log_theta_weight(state, q0, offline, x)?;
    if l < f64::MIN_POSITIVE.ln() {
        return Err(Error::Underflow { log_value: l });
    }
    Ok(l.exp())
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-0.5 * (x - mean).powi(2) / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Closed-form unnormalized conditional density q(x,t) at the points `xs` (n = 1).
pub fn makowsky_density_1d(
    state: &FilterState,
    q0: &InitialDensity,
    offline: &OfflineSolution,
    xs: &[f64],
) -> Result<Vec<f64>> {
    if q0.dim() != 1 {
        return Err(Error::Unsupported("closed-form density is tabulated for n = 1 only"));
    }
    let k = state.t_index;
    let (sigma, phi) = (offline.sigma(k)[(0, 0)], offline.phi(k)[(0, 0)]);
    let law = tilted_law(q0, offline.s(k), &state.rho)?;
    let b = law.moments().b[0];
    let shift = state.xhat[0] - phi * b;
    let nu = state.nu();
    if let Some(comps) = law.components() {
        return Ok(xs
            .iter()
            .map(|&x| {
                nu * comps
                    .iter()
                    .map(|(w, m, c)| w * normal_pdf(x, shift + phi * m[0], phi * phi * c[(0, 0)] + sigma))
                    .sum::<f64>()
            })
            .collect());
    }
    let (nodes, weights) = law.grid().expect("grid law");
    if sigma > 1e-10 * (1.0 + phi * phi) {
        return Ok(xs
            .iter()
            .map(|&x| {
                nu * nodes
                    .iter()
                    .zip(weights)
                    .map(|(y, w)| w * normal_pdf(x, shift + phi * y, sigma))
                    .sum::<f64>()
            })
            .collect());
    }
    // Σ ≈ 0: q is the pushforward of the tilted law under y ↦ Φy + shift.
    let DensityKind::Grid1d { values, .. } = q0.kind() else {
        unreachable!()
    };
    let s = offline.s(k)[(0, 0)];
    let r = state.rho[0];
    let ln_z = law.log_normalizer();
    let tilted: Vec<f64> = nodes
        .iter()
        .zip(values)
        .map(|(&y, &q)| q * (-0.5 * s * y * y + r * y - ln_z).exp())
        .collect();
    Ok(xs
        .iter()
        .map(|&x| {
            let y = (x - shift) / phi;
            nu * crate::density::interp_linear(nodes, &tilted, y) / phi.abs()
        })
        .collect())
}

/// Log-density of the closed-form conditional law for Gaussian/mixture q₀ in any dimension.
pub fn makowsky_log_density(
    state: &FilterState,
    q0: &InitialDensity,
    offline: &OfflineSolution,
    x: &Vector,
) -> Result<f64> {
    let k = state.t_index;
    let phi = offline.phi(k);
    let law = tilted_law(q0, offline.s(k), &state.rho)?;
    let b = law.moments().b;
    let comps = law
        .components()
        .ok_or(Error::Unsupported("closed-form log-density needs Gaussian components"))?;
    let shift = &state.xhat - phi * b;
    let n = x.len() as f64;
    let mut terms = Vec::with_capacity(comps.len());
    for (w, m, c) in comps {
        let cov = phi * c * phi.transpose() + offline.sigma(k);
        let (prec, logdet) = spd_inverse_logdet(&cov)?;
        let d = x - &shift - phi * m;
        terms.push(w.ln() - 0.5 * (d.dot(&(prec * &d)) + logdet + n * (2.0 * std::f64::consts::PI).ln()));
    }
    Ok(state.log_nu + crate::linalg::log_sum_exp(&terms))
}

/// Convenience wrapper bundling the filter inputs.
#[derive(Debug, Clone, Copy)]
pub struct SufficientStatFilter<'a> {
    pub model: &'a LinearModel,
    pub offline: &'a OfflineSolution,
    pub q0: &'a InitialDensity,
}

impl<'a> SufficientStatFilter<'a> {
    pub fn new(model: &'a LinearModel, offline: &'a OfflineSolution, q0: &'a InitialDensity) -> Self {
        Self { model, offline, q0 }
    }
    pub fn init(&self) -> Result<FilterState> {
        init_filter(self.q0)
    }
    pub fn step(&self, state: &FilterState, v: &Vector, dz: &Vector) -> Result<(FilterState, Mat)> {
        step_filter_with_gamma(
            state,
            self.model,
            self.offline,
            self.q0,
            v,
            dz,
            self.offline.grid().dt(),
            Scheme::Milstein,
        )
    }
    pub fn gamma(&self, state: &FilterState) -> Result<Mat> {
        filter_gamma(state, self.q0, self.offline)
    }
    pub fn moments(&self, state: &FilterState) -> Result<(f64, Vector, Mat)> {
        makowsky_moments(state, self.q0, self.offline)
    }
    pub fn characteristic(&self, state: &FilterState, lambda: &Vector) -> Result<Complex64> {
        characteristic_function(state, self.q0, self.offline, lambda)
    }
    pub fn theta(&self, state: &FilterState, x: &Vector) -> Result<f64> {
        theta_weight(state, self.q0, self.offline, x)
    }
}
