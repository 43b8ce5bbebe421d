//! File emission. Floats are written in the shortest decimal form that
//! round-trips to the same double (via `ryu`), so reruns are byte-identical
//! and values survive a text round trip exactly.

use std::path::{Path, PathBuf};

use elrdyn_core::simulate::TrajectoryRow;
use elrdyn_core::stochastic::Ensemble;
use serde::Serialize;

use crate::error::{CliError, Result};

pub fn fmt_f64(x: f64) -> String {
    ryu::Buffer::new().format(x).to_owned()
}

/// Resolves a configured output path against the output directory.
pub fn resolve(out_dir: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn trajectory_header(depth: usize) -> Vec<String> {
    let mut header: Vec<String> = ["step", "lambda", "kappa_crit", "kappa_sub", "s_rel", "flip"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 1..=depth {
        header.push(format!("sigma_sq_{i}"));
        header.push(format!("gradnorm_{i}"));
        header.push(format!("elr_{i}"));
    }
    header
}

pub fn write_trajectory(path: &Path, depth: usize, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(trajectory_header(depth))
        .map_err(|e| csv_err(path, e))?;
    for row in rows {
        let mut rec = vec![
            row.step.to_string(),
            fmt_f64(row.lambda),
            fmt_f64(row.kappa_crit),
            row.kappa_sub.map(fmt_f64).unwrap_or_default(),
            fmt_f64(row.s_rel),
            u8::from(row.flip).to_string(),
        ];
        for l in &row.layers {
            rec.push(fmt_f64(l.sigma_sq));
            rec.push(fmt_f64(l.grad_norm));
            rec.push(fmt_f64(l.elr));
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub const ENSEMBLE_HEADER: [&str; 8] = [
    "step",
    "layer",
    "mean_wnorm_sq",
    "std_wnorm_sq",
    "mean_gnorm_sq",
    "std_gnorm_sq",
    "mean_elr",
    "std_elr",
];

pub fn write_ensemble(path: &Path, ensemble: &Ensemble) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(ENSEMBLE_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for st in &ensemble.steps {
        for (l, m) in st.layers.iter().enumerate() {
            let rec = [
                st.step.to_string(),
                (l + 1).to_string(),
                fmt_f64(m.wnorm_sq.mean),
                fmt_f64(m.wnorm_sq.std),
                fmt_f64(m.gnorm_sq.mean),
                fmt_f64(m.gnorm_sq.std),
                fmt_f64(m.elr.mean),
                fmt_f64(m.elr.std),
            ];
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
