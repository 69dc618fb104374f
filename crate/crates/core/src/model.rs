//! Problem definition: linear dynamics, linear observation, quadratic cost.
//!
//! ```text
//! dx = (F x + G v) dt + σ dw        state, x ∈ Rⁿ, v ∈ Rᵐ
//! dz = H x dt + db                  observation, z ∈ Rᵈ
//! J  = E[∫ xᵀMx + vᵀNv dt + x(T)ᵀ M_T x(T)]
//! ```

use crate::error::{Error, Result};
use crate::linalg::{check_pd, check_psd, symmetrized, Mat};

/// Raw, unchecked model matrices. Turn into a [`LinearModel`] with
/// [`LinearModel::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrices {
    pub f: Mat,
    pub g: Mat,
    pub h: Mat,
    pub sigma: Mat,
    pub m: Mat,
    pub n: Mat,
    pub m_t: Mat,
    pub horizon: f64,
}

/// A validated linear-quadratic model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    raw: ModelMatrices,
    /// a = ½σσᵀ
    a: Mat,
    n_inv: Mat,
    /// G N⁻¹ Gᵀ
    control_weight: Mat,
    /// Hᵀ H
    obs_weight: Mat,
}

fn shape(m: &Mat) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn expect_shape(m: &Mat, rows: usize, cols: usize, what: &'static str) -> Result<()> {
    if m.nrows() == rows && m.ncols() == cols {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what,
            expected: format!("{rows}x{cols}"),
            found: shape(m),
        })
    }
}

impl LinearModel {
    /// Validates shapes and the definiteness invariants.
    pub fn new(raw: ModelMatrices) -> Result<Self> {
        let n = raw.f.nrows();
        expect_shape(&raw.f, n, n, "F")?;
        let m = raw.g.ncols();
        expect_shape(&raw.g, n, m, "G")?;
        let d = raw.h.nrows();
        expect_shape(&raw.h, d, n, "H")?;
        expect_shape(&raw.sigma, n, n, "sigma")?;
        expect_shape(&raw.m, n, n, "M")?;
        expect_shape(&raw.n, m, m, "N")?;
        expect_shape(&raw.m_t, n, n, "M_T")?;
        if n == 0 {
            return Err(Error::ShapeMismatch {
                what: "F",
                expected: "nonempty".into(),
                found: "0x0".into(),
            });
        }
        let all = [&raw.f, &raw.g, &raw.h, &raw.sigma, &raw.m, &raw.n, &raw.m_t];
        if all.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidDensity("non-finite model entry".into()));
        }
        if !(raw.horizon > 0.0) || !raw.horizon.is_finite() {
            return Err(Error::NonpositiveHorizon(raw.horizon));
        }
        check_pd(&raw.n, "N")?;
        check_psd(&raw.m, "M")?;
        check_psd(&raw.m_t, "M_T")?;
        let a = symmetrized(0.5 * &raw.sigma * raw.sigma.transpose());
        check_psd(&a, "a")?;
        let n_inv = symmetrized(raw.n.clone().try_inverse().ok_or(Error::NotPositiveDefinite("N"))?);
        let control_weight = symmetrized(&raw.g * &n_inv * raw.g.transpose());
        let obs_weight = symmetrized(raw.h.transpose() * &raw.h);
        Ok(Self {
            raw,
            a,
            n_inv,
            control_weight,
            obs_weight,
        })
    }

    /// Scalar model (n = m = d = 1).
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(f: f64, g: f64, h: f64, sigma: f64, m: f64, n: f64, m_t: f64, horizon: f64) -> Result<Self> {
        let s = |v: f64| Mat::from_element(1, 1, v);
        Self::new(ModelMatrices {
            f: s(f),
            g: s(g),
            h: s(h),
            sigma: s(sigma),
            m: s(m),
            n: s(n),
            m_t: s(m_t),
            horizon,
        })
    }

    pub fn raw(&self) -> &ModelMatrices {
        &self.raw
    }
    pub fn f(&self) -> &Mat {
        &self.raw.f
    }
    pub fn g(&self) -> &Mat {
        &self.raw.g
    }
    pub fn h(&self) -> &Mat {
        &self.raw.h
    }
    pub fn sigma(&self) -> &Mat {
        &self.raw.sigma
    }
    pub fn m(&self) -> &Mat {
        &self.raw.m
    }
    pub fn n(&self) -> &Mat {
        &self.raw.n
    }
    pub fn m_t(&self) -> &Mat {
        &self.raw.m_t
    }
    pub fn horizon(&self) -> f64 {
        self.raw.horizon
    }
    /// Diffusion matrix a = ½σσᵀ.
    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn n_inv(&self) -> &Mat {
        &self.n_inv
    }
    /// G N⁻¹ Gᵀ.
    pub fn control_weight(&self) -> &Mat {
        &self.control_weight
    }
    /// Hᵀ H.
    pub fn obs_weight(&self) -> &Mat {
        &self.obs_weight
    }
    pub fn state_dim(&self) -> usize {
        self.raw.f.nrows()
    }
    pub fn control_dim(&self) -> usize {
        self.raw.g.ncols()
    }
    pub fn obs_dim(&self) -> usize {
        self.raw.h.nrows()
    }

    /// Same matrices with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        let mut raw = self.raw.clone();
        raw.horizon = horizon;
        Self::new(raw)
    }

    pub(crate) fn require_scalar(&self, what: &'static str) -> Result<()> {
        if self.state_dim() == 1 && self.obs_dim() == 1 && self.control_dim() == 1 {
            Ok(())
        } else {
            Err(Error::Unsupported(what))
        }
    }
}

/// Uniform time grid `t_k = k·dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    n_steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::NonpositiveHorizon(horizon));
        }
        if n_steps == 0 {
            return Err(Error::ShapeMismatch {
                what: "n_steps",
                expected: ">= 1".into(),
                found: "0".into(),
            });
        }
        Ok(Self { n_steps, horizon })
    }

    pub fn for_model(model: &LinearModel, n_steps: usize) -> Result<Self> {
        Self::new(model.horizon(), n_steps)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    /// `t_k`; the last node is exactly the horizon.
    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.t(k))
    }
}
