//! End-to-end behaviour of the scenario harness: files, determinism, config errors.

use std::path::Path;

use lqsep::harness::{self, load_scenario, parse_table, scenario_from_table, set_dotted, Scenario};
use lqsep::Error;

const SC1: &str = r#"
[model]
F = 0.0
G = 1.0
H = 1.0
sigma = 1.0
M = 1.0
N = 1.0
M_T = 0.0
T = 1.0

[density]
kind = "mixture"
weights = [0.5, 0.5]
means = [-1.0, 1.0]
covs = [0.25, 0.25]

[grid]
n_steps = 200

[oracles.grid]
cells = 401
width_sigmas = 8.0

[oracles.particles]
count = 2000

[mc]
n_mc = 100
seed = 5
"#;

fn scenario_in(dir: &Path, text: &str) -> Scenario {
    let mut sc = scenario_from_table(&parse_table(text).unwrap()).unwrap();
    sc.output_dir = dir.to_path_buf();
    sc
}

#[test]
fn run_outputs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    harness::run(&scenario_in(a.path(), SC1)).unwrap();
    harness::run(&scenario_in(b.path(), SC1)).unwrap();
    for f in ["trajectory.csv", "summary.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn seed_changes_the_trajectory() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    harness::run(&scenario_in(a.path(), SC1)).unwrap();
    let mut sc = scenario_in(b.path(), SC1);
    sc.seed = 6;
    harness::run(&sc).unwrap();
    let x = std::fs::read(a.path().join("trajectory.csv")).unwrap();
    let y = std::fs::read(b.path().join("trajectory.csv")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn trajectory_has_oracle_columns_and_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let rep = harness::run(&scenario_in(dir.path(), SC1)).unwrap();
    let text = std::fs::read_to_string(rep.trajectory).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,xhat,rho,log_nu,gamma,v,grid_nu,grid_mean,grid_cov,pf_nu,pf_mean,pf_cov,ess"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 201);
    for row in &rows {
        assert_eq!(row.split(',').count(), 13);
    }
    let last_t: f64 = rows[200].split(',').next().unwrap().parse().unwrap();
    assert_eq!(last_t, 1.0);
    let summary = std::fs::read_to_string(rep.summary).unwrap();
    let vf = summary.lines().find(|l| l.starts_with("value_function,")).unwrap();
    let analytic = vf.split(',').nth(1).unwrap();
    assert_eq!(analytic.split('e').next().unwrap().replace(['-', '.'], "").len(), 17);
}

#[test]
fn physical_measure_records_true_state() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SC1}\n[trajectory]\nmeasure = \"physical\"\n");
    let rep = harness::run(&scenario_in(dir.path(), &text)).unwrap();
    let header = std::fs::read_to_string(rep.trajectory).unwrap();
    assert!(header.starts_with("t,xhat,rho,log_nu,gamma,v,x_true,grid_nu"));
}

#[test]
fn two_dimensional_columns_are_suffixed() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
[model]
F = [[0.0, 1.0], [-1.0, 0.0]]
G = [[0.0], [1.0]]
H = [[1.0, 0.0]]
sigma = [[0.3, 0.0], [0.0, 0.3]]
M = [[1.0, 0.0], [0.0, 1.0]]
N = 1.0
M_T = [[0.0, 0.0], [0.0, 0.0]]
T = 0.5
[density]
kind = "gaussian"
mean = [0.5, 0.0]
cov = [[1.0, 0.2], [0.2, 0.5]]
[grid]
n_steps = 50
[mc]
n_mc = 20
"#;
    let rep = harness::run(&scenario_in(dir.path(), text)).unwrap();
    let traj = std::fs::read_to_string(&rep.trajectory).unwrap();
    assert_eq!(
        traj.lines().next().unwrap(),
        "t,xhat_0,xhat_1,rho_0,rho_1,log_nu,gamma_00,gamma_01,gamma_10,gamma_11,v"
    );
    let vf = rep.rows.iter().find(|r| r.quantity == "value_function").unwrap();
    let (a, e, s) = (vf.analytic.unwrap(), vf.estimate.unwrap(), vf.stderr.unwrap());
    assert!((a - e).abs() <= 3.0 * s, "{a} vs {e} +- {s}");
}

#[test]
fn missing_field_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, SC1.replace("F = 0.0\n", "")).unwrap();
    match load_scenario(&path) {
        Err(Error::ConfigParse { path, .. }) => assert_eq!(path, "model.F"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_values_surface_module_errors() {
    let mut t = parse_table(SC1).unwrap();
    set_dotted(&mut t, "model.T", "-1.0").unwrap();
    assert!(scenario_from_table(&t).is_err());
    let mut t = parse_table(SC1).unwrap();
    set_dotted(&mut t, "density.covs", "[0.25, -0.25]").unwrap();
    assert!(scenario_from_table(&t).is_err());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = parse_table(SC1).unwrap();
    set_dotted(&mut t, "output.dir", &format!("{:?}", dir.path().display().to_string())).unwrap();
    set_dotted(&mut t, "mc.n_mc", "20").unwrap();
    let values: Vec<String> = ["0.0", "1.0"].map(String::from).to_vec();
    let rows = harness::sweep(&t, "model.M", &values).unwrap();
    assert_eq!(rows.len(), 2);
    // M = 0 with M_T = 0 leaves only the control cost, which the optimal policy keeps at zero.
    assert_eq!(rows[0].estimate.mean, 0.0);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("model.M,analytic,estimate,stderr\n0.0,"));
}

#[test]
fn invariant_suite_passes_on_gaussian() {
    let dir = tempfile::tempdir().unwrap();
    let text = SC1.replace(
        "kind = \"mixture\"\nweights = [0.5, 0.5]\nmeans = [-1.0, 1.0]\ncovs = [0.25, 0.25]",
        "kind = \"gaussian\"\nmean = 0.3\ncov = 0.8\nmass = 2.0",
    );
    let rep = harness::check(&scenario_in(dir.path(), &text)).unwrap();
    assert_eq!(rep.failed(), 0, "{:#?}", rep.results);
}
