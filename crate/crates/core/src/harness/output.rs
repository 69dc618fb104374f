//! CSV writers. Numbers carry 17 significant digits so files round-trip.

use std::fmt::Write as _;
use std::path::Path;

use super::TrajectoryRecord;
use crate::error::Result;
use crate::linalg::{Mat, Vector};

pub fn format_number(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// One `quantity,analytic,estimate,stderr` row; missing entries print as `nan`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub quantity: String,
    pub analytic: Option<f64>,
    pub estimate: Option<f64>,
    pub stderr: Option<f64>,
}

impl SummaryRow {
    pub fn new(quantity: &str, analytic: Option<f64>, estimate: Option<f64>, stderr: Option<f64>) -> Self {
        Self {
            quantity: quantity.to_string(),
            analytic,
            estimate,
            stderr,
        }
    }
}

fn opt(x: Option<f64>) -> String {
    format_number(x.unwrap_or(f64::NAN))
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut s = String::from("quantity,analytic,estimate,stderr\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.quantity,
            opt(r.analytic),
            opt(r.estimate),
            opt(r.stderr)
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn vec_names(base: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![base.to_string()]
    } else {
        (0..n).map(|i| format!("{base}_{i}")).collect()
    }
}

fn mat_names(base: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![base.to_string()]
    } else {
        (0..n)
            .flat_map(|i| (0..n).map(move |j| format!("{base}_{i}{j}")))
            .collect()
    }
}

fn push_vec(row: &mut Vec<String>, v: &Vector) {
    row.extend(v.iter().map(|x| format_number(*x)));
}

fn push_mat(row: &mut Vec<String>, m: &Mat) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            row.push(format_number(m[(i, j)]));
        }
    }
}

/// Header and rows of a trajectory; scalar columns keep their plain names.
pub fn trajectory_table(rec: &TrajectoryRecord) -> (Vec<String>, Vec<Vec<String>>) {
    let n = rec.xhat.first().map_or(1, |v| v.len());
    let m = rec.v.first().map_or(1, |v| v.len());
    let mut header = vec!["t".to_string()];
    header.extend(vec_names("xhat", n));
    header.extend(vec_names("rho", n));
    header.push("log_nu".into());
    header.extend(mat_names("gamma", n));
    header.extend(vec_names("v", m));
    if rec.x_true.is_some() {
        header.extend(vec_names("x_true", n));
    }
    if rec.grid.is_some() {
        header.extend(["grid_nu", "grid_mean", "grid_cov"].map(String::from));
    }
    if rec.particles.is_some() {
        header.push("pf_nu".into());
        header.extend(vec_names("pf_mean", n));
        header.extend(mat_names("pf_cov", n));
        header.push("ess".into());
    }
    let rows = (0..rec.t.len())
        .map(|k| {
            let mut row = vec![format_number(rec.t[k])];
            push_vec(&mut row, &rec.xhat[k]);
            push_vec(&mut row, &rec.rho[k]);
            row.push(format_number(rec.log_nu[k]));
            push_mat(&mut row, &rec.gamma[k]);
            push_vec(&mut row, &rec.v[k]);
            if let Some(x) = &rec.x_true {
                push_vec(&mut row, &x[k]);
            }
            if let Some(g) = &rec.grid {
                row.push(format_number(g[k].nu));
                row.push(format_number(g[k].mean[0]));
                row.push(format_number(g[k].cov[(0, 0)]));
            }
            if let Some(p) = &rec.particles {
                row.push(format_number(p[k].moments.nu));
                push_vec(&mut row, &p[k].moments.mean);
                push_mat(&mut row, &p[k].moments.cov);
                row.push(format_number(p[k].ess));
            }
            row
        })
        .collect();
    (header, rows)
}

pub fn write_trajectory(path: &Path, rec: &TrajectoryRecord) -> Result<()> {
    let (header, rows) = trajectory_table(rec);
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}
