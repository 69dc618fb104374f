//! The three batch entry points behind the command line: `run`, `check` and `sweep`.

use std::path::PathBuf;

use rand::Rng;
use toml::Table;

use super::{
    format_number, replication_rng, run_replications, scenario_from_table, set_dotted, simulate_path, write_summary,
    write_trajectory, Estimate, Measure, Policy, Scenario, SimOptions, SummaryRow,
};
use crate::control::{pde_axes, solve_mu_1d, solve_z_1d, value_function, value_t_derivative, ValueTimeDerivative};
use crate::density::InitialDensity;
use crate::error::{Error, Result};
use crate::linalg::{is_psd, max_abs, Mat, Vector};
use crate::model::LinearModel;
use crate::offline::{solve_gaussian_offline, OfflineSolution};
use crate::stats::{gamma_mat, tilted_moments};
use crate::zakai::{init_grid, step_zakai_grid};

const STREAM_CHECK: u64 = 7;

/// Analytic value `Φ(q₀, 0)` for the optimal policy.
///
/// `None` when the policy is not optimal, or when q₀ is non-Gaussian in more
/// than one dimension (the μ grid solver is scalar only).
pub fn analytic_value(sc: &Scenario, offline: &OfflineSolution) -> Result<Option<f64>> {
    if sc.policy != Policy::Optimal {
        return Ok(None);
    }
    if !sc.q0.is_gaussian() && sc.model.require_scalar("").is_err() {
        return Ok(None);
    }
    let mu = solve_mu_1d(&sc.model, &sc.q0, offline, &sc.pde)?;
    Ok(Some(value_function(&sc.q0, offline, &mu)?))
}

fn value_derivative(sc: &Scenario, offline: &OfflineSolution) -> Result<Option<ValueTimeDerivative>> {
    if sc.model.require_scalar("").is_err() {
        return Ok(None);
    }
    let z = solve_z_1d(&sc.model, &sc.q0, offline, &sc.pde, false)?;
    Ok(Some(value_t_derivative(&sc.q0, &sc.model, offline, &z)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub trajectory: PathBuf,
    pub summary: PathBuf,
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

/// Records one trajectory (replication 0, oracles on), runs the Monte Carlo
/// estimators and writes `trajectory.csv` and `summary.csv` under `sc.output_dir`.
pub fn run(sc: &Scenario) -> Result<RunReport> {
    let off = sc.offline()?;
    std::fs::create_dir_all(&sc.output_dir)?;
    let opts = SimOptions {
        record: true,
        oracles: true,
    };
    let rec = simulate_path(sc, &off, 0, sc.measure, opts)?
        .record
        .expect("recording was requested");
    let trajectory = sc.output_dir.join("trajectory.csv");
    write_trajectory(&trajectory, &rec)?;

    let analytic = analytic_value(sc, &off)?;
    let reference = run_replications(sc, &off, Measure::Reference)?;
    let physical = run_replications(sc, &off, Measure::Physical)?;
    let ref_cost = Estimate::from_samples(&reference.iter().map(|o| o.cost).collect::<Vec<_>>());
    let phys_cost = Estimate::from_samples(&physical.iter().map(|o| o.cost).collect::<Vec<_>>());
    let nu_t = Estimate::from_samples(&reference.iter().map(|o| o.nu_t).collect::<Vec<_>>());

    let mut warnings = Vec::new();
    let mut rows = vec![
        SummaryRow::new("value_function", analytic, Some(ref_cost.mean), Some(ref_cost.stderr)),
        SummaryRow::new("cost_physical", analytic, Some(phys_cost.mean), Some(phys_cost.stderr)),
        SummaryRow::new("nu_T", Some(sc.q0.mass()), Some(nu_t.mean), Some(nu_t.stderr)),
    ];
    if let Some(d) = value_derivative(sc, &off)? {
        if d.disagreement {
            warnings.push("value time derivative: quadrature and closed form disagree".to_string());
        }
        rows.push(SummaryRow::new(
            "value_t_derivative",
            d.closed_form,
            Some(d.quadrature),
            None,
        ));
    }
    if sc.model.require_scalar("").is_ok() {
        let (_, rho_axis) = pde_axes(&sc.model, &sc.q0, &off, &sc.pde)?;
        let half = 0.5 * rho_axis.hi();
        let exits = reference.iter().filter(|o| o.max_abs_rho > half).count();
        let frac = exits as f64 / reference.len() as f64;
        if frac > 0.01 {
            warnings.push(format!(
                "{:.1}% of reference paths left |rho| <= {half:.3}; widen pde.rho_half",
                100.0 * frac
            ));
        }
        rows.push(SummaryRow::new("rho_exit_fraction", None, Some(frac), None));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let summary = sc.output_dir.join("summary.csv");
    write_summary(&summary, &rows)?;
    Ok(RunReport {
        trajectory,
        summary,
        rows,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub results: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> usize {
        self.results.iter().filter(|r| r.passed).count()
    }
    pub fn failed(&self) -> usize {
        self.results.len() - self.passed()
    }
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.results.push(CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        });
    }
    /// Records a failed check instead of propagating the error.
    fn record(&mut self, name: &str, r: Result<(bool, String)>) {
        match r {
            Ok((p, d)) => self.push(name, p, d),
            Err(e) => self.push(name, false, e.to_string()),
        }
    }
}

fn within_se(a: &Estimate, b: f64, b_se: f64) -> (bool, String) {
    let se = (a.stderr * a.stderr + b_se * b_se).sqrt();
    let diff = (a.mean - b).abs();
    (
        diff <= 3.0 * se,
        format!("|{:.6} - {:.6}| = {:.3e}, 3 SE = {:.3e}", a.mean, b, diff, 3.0 * se),
    )
}

fn check_offline_psd(off: &OfflineSolution) -> (bool, String) {
    let n = off.grid().n_steps();
    let bad = (0..=n).find(|&k| !(is_psd(off.sigma(k)) && is_psd(off.s(k)) && is_psd(off.pi(k))));
    match bad {
        None => (true, format!("Sigma, S, pi PSD at {} nodes", n + 1)),
        Some(k) => (false, format!("not PSD at t = {}", off.grid().t(k))),
    }
}

/// Γ for the Gaussian with q₀'s mass, mean and covariance must equal P(t).
fn check_gaussian_collapse(sc: &Scenario, off: &OfflineSolution) -> Result<(bool, String)> {
    let m = sc.q0.moments()?;
    let cov = m.covariance();
    let g = InitialDensity::gaussian(m.mean.clone(), cov.clone(), m.mass)?;
    let bundle = solve_gaussian_offline(&sc.model, off.grid(), off, &cov)?;
    let mut rng = replication_rng(sc.seed, 0, STREAM_CHECK);
    let n = sc.model.state_dim();
    let n_steps = off.grid().n_steps();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(0..=n_steps);
        let rho = Vector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let gm = gamma_mat(&g, off.sigma(k), off.phi(k), off.s(k), &rho)?;
        worst = worst.max(max_abs(&(gm - bundle.p(k))));
    }
    Ok((worst <= 1e-6, format!("max |Gamma - P| = {worst:.3e}")))
}

/// Central differences of b in ρ against B − bbᵀ.
fn check_tilt_derivative(sc: &Scenario, off: &OfflineSolution) -> Result<(bool, String)> {
    let mut rng = replication_rng(sc.seed, 1, STREAM_CHECK);
    let n = sc.model.state_dim();
    let n_steps = off.grid().n_steps();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(0..=n_steps);
        let s = off.s(k);
        let rho = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let tm = tilted_moments(&sc.q0, s, &rho)?;
        let mut fd = Mat::zeros(n, n);
        for j in 0..n {
            let mut up = rho.clone();
            let mut dn = rho.clone();
            up[j] += h;
            dn[j] -= h;
            let d = (tilted_moments(&sc.q0, s, &up)?.b - tilted_moments(&sc.q0, s, &dn)?.b) / (2.0 * h);
            fd.set_column(j, &d);
        }
        worst = worst.max(max_abs(&(fd - &tm.cov)) / (1.0 + max_abs(&tm.second)));
    }
    Ok((worst <= 1e-5, format!("max scaled error {worst:.3e}")))
}

fn check_grid_mass(sc: &Scenario) -> Result<(bool, String)> {
    let mut raw = sc.model.raw().clone();
    raw.h = Mat::zeros(raw.h.nrows(), raw.h.ncols());
    let model = LinearModel::new(raw)?;
    let cells = sc.grid_oracle.map_or(801, |g| g.cells);
    let mut q = init_grid(&sc.q0, cells, sc.grid_oracle.map_or(8.0, |g| g.width_sigmas))?;
    let dt = sc.grid.dt();
    let mass = |q: &crate::zakai::GridDensity| q.values().iter().sum::<f64>() * q.dx();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let before = mass(&q);
        let sub = (dt / q.cfl_limit(&model, 0.0)).ceil().max(1.0) as usize;
        for _ in 0..sub {
            q = step_zakai_grid(&q, &model, 0.0, 0.0, dt / sub as f64)?;
        }
        worst = worst.max((mass(&q) - before).abs() / before);
    }
    Ok((worst <= 1e-12, format!("max relative mass change per step {worst:.3e}")))
}

fn check_path_gamma(sc: &Scenario, off: &OfflineSolution) -> Result<(bool, String)> {
    let o = SimOptions {
        record: true,
        oracles: false,
    };
    let rec = simulate_path(sc, off, 0, Measure::Reference, o)?
        .record
        .expect("recording was requested");
    let bad = rec.gamma.iter().position(|g| !is_psd(g));
    Ok(match bad {
        None => (true, format!("{} nodes", rec.gamma.len())),
        Some(k) => (false, format!("Gamma not PSD at t = {}", rec.t[k])),
    })
}

fn check_determinism(sc: &Scenario, off: &OfflineSolution) -> Result<(bool, String)> {
    let o = SimOptions {
        record: true,
        oracles: true,
    };
    let a = simulate_path(sc, off, 1, sc.measure, o)?;
    let b = simulate_path(sc, off, 1, sc.measure, o)?;
    Ok((a == b, "replication 1 simulated twice".to_string()))
}

/// The invariant suite. Each check is independent; an error inside one is
/// reported as a failure of that check.
pub fn check(sc: &Scenario) -> Result<CheckReport> {
    let off = sc.offline()?;
    let mut rep = CheckReport::default();
    let (p, d) = check_offline_psd(&off);
    rep.push("offline_psd", p, d);
    rep.record("gaussian_collapse", check_gaussian_collapse(sc, &off));
    rep.record("tilt_derivative", check_tilt_derivative(sc, &off));
    rep.record("gamma_psd_along_path", check_path_gamma(sc, &off));
    rep.record("determinism", check_determinism(sc, &off));
    if sc.model.require_scalar("").is_ok() {
        rep.record("grid_mass_conservation", check_grid_mass(sc));
    }
    let reference = run_replications(sc, &off, Measure::Reference);
    let physical = run_replications(sc, &off, Measure::Physical);
    match (reference, physical) {
        (Ok(r), Ok(p)) => {
            let nu = Estimate::from_samples(&r.iter().map(|o| o.nu_t).collect::<Vec<_>>());
            let (ok, d) = within_se(&nu, sc.q0.mass(), 0.0);
            rep.push("nu_martingale", ok, d);
            let rc = Estimate::from_samples(&r.iter().map(|o| o.cost).collect::<Vec<_>>());
            let pc = Estimate::from_samples(&p.iter().map(|o| o.cost).collect::<Vec<_>>());
            let (ok, d) = within_se(&pc, rc.mean, rc.stderr);
            rep.push("girsanov_duality", ok, d);
        }
        (Err(e), _) | (_, Err(e)) => {
            rep.push("nu_martingale", false, e.to_string());
            rep.push("girsanov_duality", false, e.to_string());
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub analytic: Option<f64>,
    pub estimate: Estimate,
}

/// Re-runs the reference-measure cost estimate with `param` set to each value
/// in turn and writes `sweep.csv` to the output directory of the first one.
pub fn sweep(table: &Table, param: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::ConfigParse {
            path: param.to_string(),
            message: "no sweep values given".to_string(),
        });
    }
    let mut rows = Vec::with_capacity(values.len());
    let mut out_dir = None;
    for v in values {
        let mut t = table.clone();
        set_dotted(&mut t, param, v)?;
        let sc = scenario_from_table(&t)?;
        let off = sc.offline()?;
        let costs: Vec<f64> = run_replications(&sc, &off, Measure::Reference)?
            .into_iter()
            .map(|o| o.cost)
            .collect();
        rows.push(SweepRow {
            value: v.clone(),
            analytic: analytic_value(&sc, &off)?,
            estimate: Estimate::from_samples(&costs),
        });
        out_dir.get_or_insert(sc.output_dir);
    }
    let dir = out_dir.expect("at least one value");
    std::fs::create_dir_all(&dir)?;
    let mut s = format!("{param},analytic,estimate,stderr\n");
    for r in &rows {
        let a = format_number(r.analytic.unwrap_or(f64::NAN));
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.value,
            a,
            format_number(r.estimate.mean),
            format_number(r.estimate.stderr)
        ));
    }
    std::fs::write(dir.join("sweep.csv"), s)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc1(q0: InitialDensity, dir: &std::path::Path) -> Scenario {
        let model = LinearModel::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let mut s = Scenario::new(model, q0, 100).unwrap();
        s.n_mc = 40;
        s.output_dir = dir.to_path_buf();
        s
    }

    #[test]
    fn gaussian_analytic_value() {
        let dir = tempfile::tempdir().unwrap();
        let sc = sc1(InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap(), dir.path());
        let off = sc.offline().unwrap();
        let v = analytic_value(&sc, &off).unwrap().unwrap();
        assert!((v - (1.0 + 1f64.cosh().ln())).abs() < 1e-4, "{v}");
        assert_eq!(analytic_value(&sc.with_policy(Policy::Zero), &off).unwrap(), None);
    }

    #[test]
    fn run_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let sc = sc1(InitialDensity::gaussian_1d(0.0, 1.0, 1.0).unwrap(), dir.path());
        let rep = run(&sc).unwrap();
        let summary = std::fs::read_to_string(&rep.summary).unwrap();
        assert!(summary.starts_with("quantity,analytic,estimate,stderr\nvalue_function,"));
        let traj = std::fs::read_to_string(&rep.trajectory).unwrap();
        assert_eq!(traj.lines().count(), 102);
        assert_eq!(traj.lines().next().unwrap(), "t,xhat,rho,log_nu,gamma,v");
    }

    #[test]
    fn check_passes_on_mixture() {
        let dir = tempfile::tempdir().unwrap();
        let q0 = InitialDensity::mixture_1d(&[(0.5, -1.0, 0.25), (0.5, 1.0, 0.25)]).unwrap();
        let mut sc = sc1(q0, dir.path());
        sc.n_mc = 200;
        let rep = check(&sc).unwrap();
        assert!(rep.failed() == 0, "{:#?}", rep.results);
        assert_eq!(rep.passed(), 8);
    }
}
