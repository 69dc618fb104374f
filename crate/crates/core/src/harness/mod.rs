//! Scenarios, seeded closed-loop simulation and Monte Carlo cost estimates.
//!
//! Two probability measures are simulated:
//!
//! - physical: the true state is drawn from q₀/mass and driven by its SDE;
//!   observations are `dz = Hx dt + db`;
//! - reference: `dz` is a pure Wiener increment and the filter mass ν(t)
//!   carries the change of measure.
//!
//! Every replication owns a ChaCha8 generator seeded from the scenario seed
//! with the replication index as its stream, so results do not depend on how
//! replications are scheduled across threads.

mod app;
mod config;
mod output;

pub use app::{analytic_value, check, run, sweep, CheckOutcome, CheckReport, RunReport, SweepRow};
pub use config::{load_scenario, parse_table, scenario_from_table, set_dotted};
pub use output::{format_number, write_summary, write_trajectory, SummaryRow};

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::control::{lq_feedback, PdeOptions};
use crate::density::InitialDensity;
use crate::error::{Error, Result};
use crate::filter::{filter_gamma, init_filter, step_filter_with_gamma, Scheme};
use crate::linalg::{Mat, Vector};
use crate::model::{LinearModel, TimeGrid};
use crate::offline::OfflineSolution;
use crate::zakai::{
    advance_zakai_grid, grid_moments, init_grid, init_particles, particle_moments, step_particles, OracleMoments,
};

/// Deterministic offset added to the optimal control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    Constant(f64),
    /// `amplitude·sin(2π·frequency·t)`
    Sin {
        amplitude: f64,
        frequency: f64,
    },
    /// `amplitude·cos(2π·frequency·t)`
    Cos {
        amplitude: f64,
        frequency: f64,
    },
}

impl Perturbation {
    pub fn at(&self, t: f64) -> f64 {
        let tau = 2.0 * std::f64::consts::PI;
        match *self {
            Perturbation::Constant(c) => c,
            Perturbation::Sin { amplitude, frequency } => amplitude * (tau * frequency * t).sin(),
            Perturbation::Cos { amplitude, frequency } => amplitude * (tau * frequency * t).cos(),
        }
    }

    /// The five offsets used for optimality comparisons.
    pub fn standard_set(amplitude: f64) -> Vec<Perturbation> {
        vec![
            Perturbation::Constant(amplitude),
            Perturbation::Constant(-amplitude),
            Perturbation::Sin {
                amplitude,
                frequency: 1.0,
            },
            Perturbation::Sin {
                amplitude: -amplitude,
                frequency: 1.0,
            },
            Perturbation::Cos {
                amplitude,
                frequency: 1.0,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// `v = −N⁻¹Gᵀπ(t)x̂`
    Optimal,
    Zero,
    Constant(Vector),
    /// Optimal control plus a deterministic offset on every component.
    Perturbed(Perturbation),
}

impl Policy {
    pub fn control(&self, model: &LinearModel, pi_t: &Mat, xhat: &Vector, t: f64) -> Vector {
        match self {
            Policy::Optimal => lq_feedback(model, pi_t, xhat),
            Policy::Zero => Vector::zeros(model.control_dim()),
            Policy::Constant(v) => v.clone(),
            Policy::Perturbed(p) => lq_feedback(model, pi_t, xhat).add_scalar(p.at(t)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Physical,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOracle {
    pub cells: usize,
    pub width_sigmas: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: LinearModel,
    pub q0: InitialDensity,
    pub grid: TimeGrid,
    pub policy: Policy,
    pub grid_oracle: Option<GridOracle>,
    pub particles: Option<usize>,
    pub seed: u64,
    pub n_mc: usize,
    pub output_dir: PathBuf,
    /// Measure of the recorded trajectory.
    pub measure: Measure,
    pub pde: PdeOptions,
    pub scheme: Scheme,
}

impl Scenario {
    /// Scenario with defaults: optimal policy, no oracles, 2000 replications.
    pub fn new(model: LinearModel, q0: InitialDensity, n_steps: usize) -> Result<Self> {
        let grid = TimeGrid::for_model(&model, n_steps)?;
        Ok(Self {
            model,
            q0,
            grid,
            policy: Policy::Optimal,
            grid_oracle: None,
            particles: None,
            seed: 0,
            n_mc: 2000,
            output_dir: PathBuf::from("out"),
            measure: Measure::Reference,
            pde: PdeOptions::default(),
            scheme: Scheme::default(),
        })
    }

    pub fn with_policy(&self, policy: Policy) -> Self {
        Self { policy, ..self.clone() }
    }

    pub fn offline(&self) -> Result<OfflineSolution> {
        crate::offline::solve_offline(&self.model, &self.grid)
    }
}

const STREAM_PATH: u64 = 0;
const STREAM_PARTICLES: u64 = 1;

/// Generator for replication `rep`; distinct `purpose` values give unrelated sequences.
pub fn replication_rng(seed: u64, rep: u64, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(rep);
    r
}

/// Particle moments as stored in a trajectory row.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleRow {
    pub moments: OracleMoments,
    pub ess: f64,
}

/// Per-node record of one simulated path (`n_steps + 1` rows).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub t: Vec<f64>,
    pub xhat: Vec<Vector>,
    pub rho: Vec<Vector>,
    pub log_nu: Vec<f64>,
    pub gamma: Vec<Mat>,
    pub v: Vec<Vector>,
    /// Observation increment over `[t_k, t_{k+1}]`; one fewer than the rows.
    pub dz: Vec<Vector>,
    pub x_true: Option<Vec<Vector>>,
    pub grid: Option<Vec<OracleMoments>>,
    pub particles: Option<Vec<ParticleRow>>,
}

/// Scalar results of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    /// Pathwise cost under the simulated measure.
    pub cost: f64,
    pub nu_t: f64,
    pub max_abs_rho: f64,
    pub record: Option<TrajectoryRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub record: bool,
    pub oracles: bool,
}

fn quad(x: &Vector, m: &Mat) -> f64 {
    x.dot(&(m * x))
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Simulates replication `rep` of the closed loop under `measure`.
pub fn simulate_path(
    sc: &Scenario,
    offline: &OfflineSolution,
    rep: u64,
    measure: Measure,
    opts: SimOptions,
) -> Result<PathOutcome> {
    let model = &sc.model;
    let q0 = &sc.q0;
    let grid = &sc.grid;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let sq = dt.sqrt();
    let (n, d) = (model.state_dim(), model.obs_dim());
    let mut rng = replication_rng(sc.seed, rep, STREAM_PATH);
    let mut x = match measure {
        Measure::Physical => Some(q0.sample(&mut rng)),
        Measure::Reference => None,
    };
    let mut state = init_filter(q0)?;
    let mut zgrid = match (opts.oracles, sc.grid_oracle) {
        (true, Some(g)) => Some(init_grid(q0, g.cells, g.width_sigmas)?),
        _ => None,
    };
    let mut prng = replication_rng(sc.seed, rep, STREAM_PARTICLES);
    let mut cloud = match (opts.oracles, sc.particles) {
        (true, Some(count)) => Some(init_particles(q0, count, &mut prng)?),
        _ => None,
    };
    let mut rec = if opts.record {
        let mut r = TrajectoryRecord::default();
        if x.is_some() {
            r.x_true = Some(Vec::new());
        }
        if zgrid.is_some() {
            r.grid = Some(Vec::new());
        }
        if cloud.is_some() {
            r.particles = Some(Vec::new());
        }
        Some(r)
    } else {
        None
    };
    let mass = q0.mass();
    let (m, nmat, m_t) = (model.m(), model.n(), model.m_t());
    let mut cost = 0.0;
    let mut max_abs_rho: f64 = 0.0;
    let mut warned = false;
    for k in 0..=n_steps {
        let t = grid.t(k);
        let v = sc.policy.control(model, offline.pi(k), &state.xhat, t);
        let w = if k == 0 || k == n_steps { 0.5 * dt } else { dt };
        if let Some(xv) = &x {
            cost += w * mass * (quad(xv, m) + quad(&v, nmat));
            if k == n_steps {
                cost += mass * quad(xv, m_t);
            }
            if let Some(r) = rec.as_mut() {
                r.x_true.as_mut().unwrap().push(xv.clone());
            }
        }
        let (dz, next) = if k < n_steps {
            let dz = match x.as_mut() {
                Some(xv) => {
                    let wn = normals(&mut rng, n);
                    let b = normals(&mut rng, d);
                    let dz = model.h() * &*xv * dt + b * sq;
                    let drift = model.f() * &*xv + model.g() * &v;
                    *xv += drift * dt + model.sigma() * wn * sq;
                    dz
                }
                None => normals(&mut rng, d) * sq,
            };
            let next = step_filter_with_gamma(&state, model, offline, q0, &v, &dz, dt, sc.scheme)?;
            (Some(dz), Some(next))
        } else {
            (None, None)
        };
        let gamma = match &next {
            Some((_, g)) => g.clone(),
            None => filter_gamma(&state, q0, offline)?,
        };
        if measure == Measure::Reference {
            let nu = state.nu();
            cost += w * nu * (quad(&state.xhat, m) + (m * &gamma).trace() + quad(&v, nmat));
            if k == n_steps {
                cost += nu * (quad(&state.xhat, m_t) + (m_t * &gamma).trace());
            }
        }
        if let Some(r) = rec.as_mut() {
            r.t.push(t);
            r.xhat.push(state.xhat.clone());
            r.rho.push(state.rho.clone());
            r.log_nu.push(state.log_nu);
            r.gamma.push(gamma);
            r.v.push(v.clone());
            if let Some(g) = &zgrid {
                r.grid.as_mut().unwrap().push(grid_moments(g)?);
            }
            if let Some(c) = &cloud {
                let row = match particle_moments(c) {
                    Ok(pm) => ParticleRow {
                        moments: pm.moments,
                        ess: pm.ess,
                    },
                    Err(Error::DegenerateWeights { ess }) => {
                        if !warned {
                            log::warn!("particle weights degenerate at t = {t} (ESS = {ess:.2})");
                            warned = true;
                        }
                        ParticleRow {
                            moments: OracleMoments {
                                nu: f64::NAN,
                                mean: Vector::from_element(n, f64::NAN),
                                cov: Mat::from_element(n, n, f64::NAN),
                            },
                            ess,
                        }
                    }
                    Err(e) => return Err(e),
                };
                r.particles.as_mut().unwrap().push(row);
            }
        }
        max_abs_rho = max_abs_rho.max(state.rho.amax());
        let Some(dz) = dz else { break };
        if let Some(r) = rec.as_mut() {
            r.dz.push(dz.clone());
        }
        if let Some(g) = zgrid.as_mut() {
            *g = advance_zakai_grid(g, model, v[0], dz[0], dt)?;
        }
        if let Some(c) = cloud.as_mut() {
            *c = step_particles(c, model, &v, &dz, dt, &mut prng);
        }
        state = next.unwrap().0;
    }
    Ok(PathOutcome {
        cost,
        nu_t: state.nu(),
        max_abs_rho,
        record: rec,
    })
}

/// Sample mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n).sqrt(),
            count: xs.len(),
        }
    }
}

/// Runs `sc.n_mc` replications in parallel; outcomes are in replication order.
pub fn run_replications(sc: &Scenario, offline: &OfflineSolution, measure: Measure) -> Result<Vec<PathOutcome>> {
    (0..sc.n_mc as u64)
        .into_par_iter()
        .map(|rep| {
            simulate_path(
                sc,
                offline,
                rep,
                measure,
                SimOptions {
                    record: false,
                    oracles: false,
                },
            )
        })
        .collect()
}

fn cost_estimate(sc: &Scenario, offline: &OfflineSolution, measure: Measure) -> Result<Estimate> {
    let costs: Vec<f64> = run_replications(sc, offline, measure)?
        .into_iter()
        .map(|o| o.cost)
        .collect();
    Ok(Estimate::from_samples(&costs))
}

/// Monte Carlo cost under the physical measure (true state simulated).
pub fn estimate_cost_physical(sc: &Scenario, offline: &OfflineSolution) -> Result<Estimate> {
    cost_estimate(sc, offline, Measure::Physical)
}

/// Monte Carlo cost under the reference measure, weighted by ν(t).
pub fn estimate_cost_reference(sc: &Scenario, offline: &OfflineSolution) -> Result<Estimate> {
    cost_estimate(sc, offline, Measure::Reference)
}

/// Paired cost differences `J(policy) − J(base)` under common random numbers.
pub fn paired_cost_difference(
    base: &Scenario,
    other: &Scenario,
    offline: &OfflineSolution,
    measure: Measure,
) -> Result<Estimate> {
    Ok(paired_cost_differences(base, std::slice::from_ref(other), offline, measure)?.remove(0))
}

/// As [`paired_cost_difference`] for several alternatives; the base path of
/// each replication is simulated once.
pub fn paired_cost_differences(
    base: &Scenario,
    others: &[Scenario],
    offline: &OfflineSolution,
    measure: Measure,
) -> Result<Vec<Estimate>> {
    let o = SimOptions {
        record: false,
        oracles: false,
    };
    let diffs: Vec<Vec<f64>> = (0..base.n_mc as u64)
        .into_par_iter()
        .map(|rep| -> Result<Vec<f64>> {
            let b = simulate_path(base, offline, rep, measure, o)?.cost;
            others
                .iter()
                .map(|sc| Ok(simulate_path(sc, offline, rep, measure, o)?.cost - b))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..others.len())
        .map(|i| Estimate::from_samples(&diffs.iter().map(|d| d[i]).collect::<Vec<_>>()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc1_mixture() -> Scenario {
        let model = LinearModel::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let q0 = InitialDensity::mixture_1d(&[(0.5, -1.0, 0.25), (0.5, 1.0, 0.25)]).unwrap();
        let mut s = Scenario::new(model, q0, 200).unwrap();
        s.n_mc = 50;
        s.seed = 17;
        s
    }

    #[test]
    fn frozen_dynamics() {
        let model = LinearModel::scalar(0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let q0 = InitialDensity::gaussian_1d(0.4, 1.0, 1.0).unwrap();
        let sc = Scenario::new(model, q0, 50).unwrap().with_policy(Policy::Zero);
        let off = sc.offline().unwrap();
        let o = SimOptions {
            record: true,
            oracles: false,
        };
        let rec = simulate_path(&sc, &off, 0, Measure::Physical, o)
            .unwrap()
            .record
            .unwrap();
        let xs = rec.x_true.unwrap();
        assert!(xs.iter().all(|x| x == &xs[0]));
        assert!(rec.xhat.iter().all(|x| x[0] == 0.4));
    }

    #[test]
    fn paths_are_deterministic() {
        let mut sc = sc1_mixture();
        sc.grid_oracle = Some(GridOracle {
            cells: 201,
            width_sigmas: 8.0,
        });
        sc.particles = Some(500);
        let off = sc.offline().unwrap();
        let o = SimOptions {
            record: true,
            oracles: true,
        };
        let a = simulate_path(&sc, &off, 3, Measure::Reference, o).unwrap();
        let b = simulate_path(&sc, &off, 3, Measure::Reference, o).unwrap();
        assert_eq!(a, b);
        let c = simulate_path(&sc, &off, 4, Measure::Reference, o).unwrap();
        assert_ne!(a.record.unwrap().dz, c.record.unwrap().dz);
    }

    #[test]
    fn gaussian_gamma_column_is_riccati() {
        let model = LinearModel::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let q0 = InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap();
        let sc = Scenario::new(model, q0, 200).unwrap();
        let off = sc.offline().unwrap();
        let o = SimOptions {
            record: true,
            oracles: false,
        };
        let rec = simulate_path(&sc, &off, 0, Measure::Reference, o)
            .unwrap()
            .record
            .unwrap();
        assert!(rec.gamma.iter().all(|g| (g[(0, 0)] - 1.0).abs() < 1e-6));
    }

    #[test]
    fn zero_cost_problem() {
        let model = LinearModel::scalar(0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let q0 = InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap();
        let mut sc = Scenario::new(model, q0, 100).unwrap().with_policy(Policy::Zero);
        sc.n_mc = 10;
        let off = sc.offline().unwrap();
        assert_eq!(estimate_cost_physical(&sc, &off).unwrap().mean, 0.0);
        assert_eq!(estimate_cost_reference(&sc, &off).unwrap().mean, 0.0);
    }

    #[test]
    fn replication_order_is_schedule_independent() {
        let sc = sc1_mixture();
        let off = sc.offline().unwrap();
        let par = estimate_cost_reference(&sc, &off).unwrap();
        let serial: Vec<f64> = (0..sc.n_mc as u64)
            .map(|r| {
                simulate_path(
                    &sc,
                    &off,
                    r,
                    Measure::Reference,
                    SimOptions {
                        record: false,
                        oracles: false,
                    },
                )
                .unwrap()
                .cost
            })
            .collect();
        assert_eq!(par, Estimate::from_samples(&serial));
    }
}
