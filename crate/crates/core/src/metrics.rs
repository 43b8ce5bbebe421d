//! Spread and convergence measurements over states and trajectories.

use serde::{Deserialize, Serialize};

use crate::dynamics::{log_ratio_sign, NetworkState};
use crate::error::{ModelError, Result};
use crate::simulate::Trajectory;

/// Relative logarithmic ELR spread: population standard deviation of `ln E`.
pub fn s_rel(elrs: &[f64]) -> Result<f64> {
    if elrs.is_empty() {
        return Err(ModelError::contract("spread of an empty ELR list"));
    }
    if let Some(bad) = elrs.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return Err(ModelError::contract(format!(
            "ELR must be positive, got {bad}"
        )));
    }
    Ok(log_std(elrs))
}

// Two-pass population std of ln(x); callers guarantee positive inputs.
pub(crate) fn log_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|e| e.ln()).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|e| {
            let d = e.ln() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    var.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadReport {
    pub s_rel: f64,
    /// `max |ln R_jk|` over all pairs, attained by the extreme pair.
    pub max_log_ratio: f64,
    /// 1-based index of the lowest-ELR layer.
    pub argmin_elr: usize,
    /// 1-based index of the highest-ELR layer.
    pub argmax_elr: usize,
}

pub fn spread_report(state: &NetworkState) -> SpreadReport {
    let (lo, hi) = state.extreme_positions();
    SpreadReport {
        s_rel: log_std(&state.elrs()),
        max_log_ratio: state.max_log_ratio(),
        argmin_elr: lo + 1,
        argmax_elr: hi + 1,
    }
}

/// Number of sign changes of `ln R_jk` over the recorded rows of a trajectory.
///
/// `pair` holds 1-based layer indices; by default the extreme pair of the
/// first row is tracked as a fixed pair. Values of `|ln R|` within
/// `tolerance` count as neither sign, so a ratio that settles at 1 is not a
/// flip.
pub fn flip_count(
    trajectory: &Trajectory,
    pair: Option<(usize, usize)>,
    tolerance: f64,
) -> Result<usize> {
    let Some(first) = trajectory.rows.first() else {
        return Ok(0);
    };
    let depth = first.layers.len();
    let (j, k) = match pair {
        Some((j, k)) => {
            if j == 0 || k == 0 || j > depth || k > depth {
                return Err(ModelError::contract(format!(
                    "layer pair ({j}, {k}) out of range 1..={depth}"
                )));
            }
            (j - 1, k - 1)
        }
        None => (first.argmax_elr - 1, first.argmin_elr - 1),
    };
    let signs = trajectory
        .rows
        .iter()
        .map(|row| log_ratio_sign((row.layers[j].elr / row.layers[k].elr).ln(), tolerance));
    Ok(count_sign_changes(signs))
}

/// Counts changes between `+1` and `-1`, skipping zeros.
pub fn count_sign_changes(signs: impl IntoIterator<Item = i8>) -> usize {
    let mut last = 0i8;
    let mut changes = 0;
    for s in signs.into_iter().filter(|s| *s != 0) {
        if last != 0 && s != last {
            changes += 1;
        }
        last = s;
    }
    changes
}

/// Mean of the per-row spreads.
pub fn mean_s_rel(trajectory: &Trajectory) -> Option<f64> {
    let n = trajectory.rows.len();
    (n > 0).then(|| trajectory.rows.iter().map(|r| r.s_rel).sum::<f64>() / n as f64)
}

/// 1-based pairs `(j, k)`, `j < k`, whose ELR ordering reverses between
/// `prev` and `next` beyond `tolerance`.
pub fn pair_flips(prev: &NetworkState, next: &NetworkState, tolerance: f64) -> Vec<(usize, usize)> {
    let before = prev.elrs();
    let after = next.elrs();
    let mut out = Vec::new();
    for j in 0..before.len() {
        for k in j + 1..before.len() {
            let s0 = log_ratio_sign((before[j] / before[k]).ln(), tolerance);
            let s1 = log_ratio_sign((after[j] / after[k]).ln(), tolerance);
            if s0 != 0 && s1 == -s0 {
                out.push((j + 1, k + 1));
            }
        }
    }
    out
}
