//! TOML scenario files.
//!
//! ```toml
//! [model]
//! F = 0.0            # scalar shorthand for [[0.0]]
//! G = [[1.0]]
//! H = 1.0
//! sigma = 1.0
//! M = 1.0
//! N = 1.0
//! M_T = 0.0
//! T = 1.0
//!
//! [density]
//! kind = "mixture"   # gaussian | mixture | grid
//! weights = [0.5, 0.5]
//! means = [-1.0, 1.0]
//! covs = [0.25, 0.25]
//!
//! [grid]
//! n_steps = 1000
//!
//! [policy]
//! kind = "optimal"   # optimal | zero | constant | perturbed
//!
//! [oracles.grid]
//! cells = 1601
//! width_sigmas = 8.0
//!
//! [oracles.particles]
//! count = 100000
//!
//! [mc]
//! n_mc = 2000
//! seed = 1
//!
//! [output]
//! dir = "out"
//!
//! [filter]
//! scheme = "milstein" # milstein | euler
//! ```

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use super::{GridOracle, Measure, Perturbation, Policy, Scenario};
use crate::control::PdeOptions;
use crate::density::InitialDensity;
use crate::error::{Error, Result};
use crate::filter::Scheme;
use crate::linalg::{Mat, Vector};
use crate::model::{LinearModel, ModelMatrices, TimeGrid};

fn err(path: &str, message: impl Into<String>) -> Error {
    Error::ConfigParse {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Reads and parses a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| err(&path.display().to_string(), e.to_string()))?;
    let table = parse_table(&text)?;
    scenario_from_table(&table)
}

pub fn parse_table(text: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| err("<file>", e.to_string()))
}

fn lookup<'a>(root: &'a Table, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut cur = root.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn required<'a>(root: &'a Table, path: &str) -> Result<&'a Value> {
    lookup(root, path).ok_or_else(|| err(path, "missing required field"))
}

fn number(v: &Value, path: &str) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(err(path, "expected a number")),
    }
}

fn integer(v: &Value, path: &str) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(err(path, "expected a non-negative integer")),
    }
}

fn string<'a>(v: &'a Value, path: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| err(path, "expected a string"))
}

fn numbers(v: &Value, path: &str) -> Result<Vec<f64>> {
    match v {
        Value::Array(a) => a.iter().map(|x| number(x, path)).collect(),
        _ => Ok(vec![number(v, path)?]),
    }
}

fn matrix(v: &Value, path: &str) -> Result<Mat> {
    match v {
        Value::Array(rows) => {
            if rows.is_empty() {
                return Err(err(path, "empty matrix"));
            }
            let rows: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| match r {
                    Value::Array(_) => numbers(r, path),
                    _ => Err(err(path, "expected a nested list (row-major)")),
                })
                .collect::<Result<_>>()?;
            let cols = rows[0].len();
            if cols == 0 || rows.iter().any(|r| r.len() != cols) {
                return Err(err(path, "rows have unequal or zero length"));
            }
            Ok(Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]))
        }
        _ => Ok(Mat::from_element(1, 1, number(v, path)?)),
    }
}

fn wrap<T>(r: Result<T>, path: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::ConfigParse { .. } => e,
        other => err(path, other.to_string()),
    })
}

fn parse_model(root: &Table) -> Result<LinearModel> {
    let m = |key: &str| {
        let path = format!("model.{key}");
        matrix(required(root, &path)?, &path)
    };
    let raw = ModelMatrices {
        f: m("F")?,
        g: m("G")?,
        h: m("H")?,
        sigma: m("sigma")?,
        m: m("M")?,
        n: m("N")?,
        m_t: m("M_T")?,
        horizon: number(required(root, "model.T")?, "model.T")?,
    };
    wrap(LinearModel::new(raw), "model")
}

fn parse_density(root: &Table) -> Result<InitialDensity> {
    let kind = string(required(root, "density.kind")?, "density.kind")?;
    let mass = match lookup(root, "density.mass") {
        Some(v) => number(v, "density.mass")?,
        None => 1.0,
    };
    match kind {
        "gaussian" => {
            let mean = Vector::from_vec(numbers(required(root, "density.mean")?, "density.mean")?);
            let cov = matrix(required(root, "density.cov")?, "density.cov")?;
            wrap(InitialDensity::gaussian(mean, cov, mass), "density")
        }
        "mixture" => {
            let weights = numbers(required(root, "density.weights")?, "density.weights")?;
            let means_v = required(root, "density.means")?;
            let covs_v = required(root, "density.covs")?;
            let (Value::Array(ms), Value::Array(cs)) = (means_v, covs_v) else {
                return Err(err(
                    "density.means",
                    "expected lists of component means and covariances",
                ));
            };
            if ms.len() != weights.len() || cs.len() != weights.len() {
                return Err(err("density.weights", "weights, means and covs must have equal length"));
            }
            let means = ms
                .iter()
                .map(|v| numbers(v, "density.means").map(Vector::from_vec))
                .collect::<Result<Vec<_>>>()?;
            let covs = cs
                .iter()
                .map(|v| matrix(v, "density.covs"))
                .collect::<Result<Vec<_>>>()?;
            let mut d = wrap(InitialDensity::mixture(weights, means, covs), "density")?;
            if lookup(root, "density.mass").is_some() {
                d = wrap(d.scaled(mass / d.mass()), "density.mass")?;
            }
            Ok(d)
        }
        "grid" => {
            let nodes = numbers(required(root, "density.nodes")?, "density.nodes")?;
            let values = numbers(required(root, "density.values")?, "density.values")?;
            let d = wrap(InitialDensity::grid1d(nodes, values), "density")?;
            if lookup(root, "density.mass").is_some() {
                wrap(d.scaled(mass / d.mass()), "density.mass")
            } else {
                Ok(d)
            }
        }
        other => Err(err("density.kind", format!("unknown kind `{other}`"))),
    }
}

fn parse_policy(root: &Table, control_dim: usize) -> Result<Policy> {
    let Some(kind) = lookup(root, "policy.kind") else {
        return Ok(Policy::Optimal);
    };
    match string(kind, "policy.kind")? {
        "optimal" => Ok(Policy::Optimal),
        "zero" => Ok(Policy::Zero),
        "constant" => {
            let v = numbers(required(root, "policy.value")?, "policy.value")?;
            if v.len() != control_dim {
                return Err(err("policy.value", format!("expected {control_dim} entries")));
            }
            Ok(Policy::Constant(Vector::from_vec(v)))
        }
        "perturbed" => {
            let amplitude = match lookup(root, "policy.amplitude") {
                Some(v) => number(v, "policy.amplitude")?,
                None => 0.25,
            };
            let frequency = match lookup(root, "policy.frequency") {
                Some(v) => number(v, "policy.frequency")?,
                None => 1.0,
            };
            let shape = match lookup(root, "policy.shape") {
                Some(v) => string(v, "policy.shape")?,
                None => "constant",
            };
            let p = match shape {
                "constant" => Perturbation::Constant(amplitude),
                "sin" => Perturbation::Sin { amplitude, frequency },
                "cos" => Perturbation::Cos { amplitude, frequency },
                other => return Err(err("policy.shape", format!("unknown shape `{other}`"))),
            };
            Ok(Policy::Perturbed(p))
        }
        other => Err(err("policy.kind", format!("unknown kind `{other}`"))),
    }
}

fn optional_usize(root: &Table, path: &str) -> Result<Option<usize>> {
    lookup(root, path)
        .map(|v| integer(v, path).map(|i| i as usize))
        .transpose()
}

pub fn scenario_from_table(root: &Table) -> Result<Scenario> {
    let model = parse_model(root)?;
    let q0 = parse_density(root)?;
    if q0.dim() != model.state_dim() {
        return Err(err(
            "density",
            format!(
                "dimension {} does not match the state dimension {}",
                q0.dim(),
                model.state_dim()
            ),
        ));
    }
    let n_steps = integer(required(root, "grid.n_steps")?, "grid.n_steps")? as usize;
    let grid = wrap(TimeGrid::for_model(&model, n_steps), "grid.n_steps")?;
    let policy = parse_policy(root, model.control_dim())?;
    let grid_oracle = match lookup(root, "oracles.grid") {
        Some(_) => Some(GridOracle {
            cells: optional_usize(root, "oracles.grid.cells")?.unwrap_or(1601),
            width_sigmas: match lookup(root, "oracles.grid.width_sigmas") {
                Some(v) => number(v, "oracles.grid.width_sigmas")?,
                None => 8.0,
            },
        }),
        None => None,
    };
    let particles = optional_usize(root, "oracles.particles.count")?;
    let n_mc = optional_usize(root, "mc.n_mc")?.unwrap_or(2000);
    if n_mc < 2 {
        return Err(err("mc.n_mc", "need at least 2 replications"));
    }
    let seed = match lookup(root, "mc.seed") {
        Some(v) => integer(v, "mc.seed")?,
        None => 0,
    };
    let output_dir = match lookup(root, "output.dir") {
        Some(v) => PathBuf::from(string(v, "output.dir")?),
        None => PathBuf::from("out"),
    };
    let measure = match lookup(root, "trajectory.measure") {
        None => Measure::Reference,
        Some(v) => match string(v, "trajectory.measure")? {
            "reference" => Measure::Reference,
            "physical" => Measure::Physical,
            other => return Err(err("trajectory.measure", format!("unknown measure `{other}`"))),
        },
    };
    let mut pde = PdeOptions::default();
    if let Some(v) = optional_usize(root, "pde.x_cells")? {
        pde.x_cells = v;
    }
    if let Some(v) = optional_usize(root, "pde.rho_cells")? {
        pde.rho_cells = v;
    }
    let scheme = match lookup(root, "filter.scheme") {
        None => Scheme::default(),
        Some(v) => match string(v, "filter.scheme")? {
            "milstein" => Scheme::Milstein,
            "euler" => Scheme::EulerMaruyama,
            other => return Err(err("filter.scheme", format!("unknown scheme `{other}`"))),
        },
    };
    Ok(Scenario {
        model,
        q0,
        grid,
        policy,
        grid_oracle,
        particles,
        seed,
        n_mc,
        output_dir,
        measure,
        pde,
        scheme,
    })
}

/// Replaces the value at a dotted path, creating intermediate tables.
/// The new value is parsed as a TOML literal, falling back to a string.
pub fn set_dotted(root: &mut Table, path: &str, literal: &str) -> Result<()> {
    let value = format!("v = {literal}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(literal.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    let (last, head) = parts.split_last().ok_or_else(|| err(path, "empty parameter path"))?;
    let mut cur = root;
    for p in head {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| err(path, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
