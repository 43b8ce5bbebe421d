//! Simulation driver for the discrete model under a learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    critical_lr, log_ratio_sign, step_network, subcritical_lr_with, NetworkState, DEFAULT_TOLERANCE,
};
use crate::error::{ModelError, Result};
use crate::metrics::{log_std, pair_flips};
use crate::schedule::{LrContext, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSample {
    pub sigma_sq: f64,
    /// Expected gradient norm `c / sigma`.
    pub grad_norm: f64,
    pub elr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    /// Learning rate applied at this step (for the last row: the rate the
    /// schedule would apply next).
    pub lambda: f64,
    pub kappa_crit: f64,
    /// Undefined for single-layer networks.
    pub kappa_sub: Option<f64>,
    pub s_rel: f64,
    /// The extreme-pair ordering reversed between this step and the next.
    pub flip: bool,
    /// 1-based indices of the lowest/highest-ELR layers.
    pub argmin_elr: usize,
    pub argmax_elr: usize,
    pub layers: Vec<LayerSample>,
}

/// Flip of the extreme pair between `step` and `step + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipEvent {
    pub step: u64,
    /// 1-based index of the layer with the highest ELR at `step`.
    pub high_layer: usize,
    /// 1-based index of the layer with the lowest ELR at `step`.
    pub low_layer: usize,
    pub lambda: f64,
    pub kappa_crit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFlip {
    pub step: u64,
    pub j: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    /// Every extreme-pair flip, regardless of `record_every`.
    pub flips: Vec<FlipEvent>,
    /// Per-pair flips; only filled when [`SimOptions::pairwise_flips`] is set.
    pub pair_flips: Vec<PairFlip>,
    /// Number of steps actually taken.
    pub steps_taken: u64,
    /// State after the last step taken.
    pub final_state: Option<NetworkState>,
}

impl Trajectory {
    pub fn flip_steps(&self) -> impl Iterator<Item = u64> + '_ {
        self.flips.iter().map(|f| f.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Keep every n-th row (the first and last rows are always kept).
    pub record_every: u64,
    /// Dead zone for ELR equality and sign decisions on `ln R`.
    pub tolerance: f64,
    pub pairwise_flips: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            record_every: 1,
            tolerance: DEFAULT_TOLERANCE,
            pairwise_flips: false,
        }
    }
}

/// A simulation stopped on a numerical failure. Carries everything recorded
/// up to and including the step that failed.
#[derive(Debug, Clone, Error)]
#[error("simulation failed at step {step}: {source}")]
pub struct SimulationFailure {
    pub step: u64,
    pub source: ModelError,
    pub trajectory: Box<Trajectory>,
}

fn sample_row(state: &NetworkState, lambda: f64, tolerance: f64) -> TrajectoryRow {
    let (lo, hi) = state.extreme_positions();
    let layers: Vec<LayerSample> = state
        .layers()
        .iter()
        .map(|l| LayerSample {
            sigma_sq: l.sigma_sq(),
            grad_norm: l.grad_norm(),
            elr: l.elr(),
        })
        .collect();
    let elrs: Vec<f64> = layers.iter().map(|l| l.elr).collect();
    TrajectoryRow {
        step: state.step_index(),
        lambda,
        kappa_crit: critical_lr(state),
        kappa_sub: subcritical_lr_with(state, tolerance).ok(),
        s_rel: log_std(&elrs),
        flip: false,
        argmin_elr: lo + 1,
        argmax_elr: hi + 1,
        layers,
    }
}

/// Whether the extreme pair of `prev` reverses its ordering in `next`.
///
/// Both orderings are judged with a dead zone of `tolerance` on `ln R`, so
/// pairs that are already equal, or that land exactly on 1, never flip.
pub fn extreme_pair_flipped(prev: &NetworkState, next: &NetworkState, tolerance: f64) -> bool {
    let (lo, hi) = prev.extreme_positions();
    let before = (prev.layers()[hi].elr() / prev.layers()[lo].elr()).ln();
    let after = (next.layers()[hi].elr() / next.layers()[lo].elr()).ln();
    log_ratio_sign(before, tolerance) == 1 && log_ratio_sign(after, tolerance) == -1
}

/// Whether `lambda` exceeds the critical learning rate of `state` by more
/// than the tolerance, with distinct extreme ELRs.
pub fn is_supercritical(state: &NetworkState, lambda: f64, tolerance: f64) -> bool {
    state.max_log_ratio() > tolerance && (lambda / critical_lr(state)).ln() > tolerance
}

pub fn simulate(
    initial: &NetworkState,
    schedule: &Schedule,
    steps: u64,
) -> std::result::Result<Trajectory, SimulationFailure> {
    simulate_with(initial, schedule, steps, &SimOptions::default())
}

pub fn simulate_with(
    initial: &NetworkState,
    schedule: &Schedule,
    steps: u64,
    options: &SimOptions,
) -> std::result::Result<Trajectory, SimulationFailure> {
    let mut traj = Trajectory::default();
    let fail = |traj: Trajectory, step: u64, source: ModelError| SimulationFailure {
        step,
        source,
        trajectory: Box::new(traj),
    };
    if steps == 0 {
        return Err(fail(
            traj,
            0,
            ModelError::config("steps must be at least 1"),
        ));
    }
    if let Err(e) = schedule.validate() {
        return Err(fail(traj, 0, e));
    }
    let every = options.record_every.max(1);
    let mut state = initial.clone();
    let mut last_lr = None;

    for i in 0..=steps {
        let ctx = LrContext::with_state(&state)
            .last_lr(last_lr)
            .tolerance(options.tolerance);
        let lambda = match schedule.lr_at(i, &ctx) {
            Ok(l) => l,
            Err(e) => {
                traj.steps_taken = i;
                traj.final_state = Some(state);
                return Err(fail(traj, i, e));
            }
        };
        let mut row = sample_row(&state, lambda, options.tolerance);
        if i == steps {
            traj.rows.push(row);
            break;
        }
        let next = match step_network(&state, lambda) {
            Ok(n) => n,
            Err(e) => {
                traj.rows.push(row);
                traj.steps_taken = i;
                traj.final_state = Some(state);
                return Err(fail(traj, i, e));
            }
        };
        if extreme_pair_flipped(&state, &next, options.tolerance) {
            row.flip = true;
            traj.flips.push(FlipEvent {
                step: i,
                high_layer: row.argmax_elr,
                low_layer: row.argmin_elr,
                lambda,
                kappa_crit: row.kappa_crit,
            });
        }
        if options.pairwise_flips {
            traj.pair_flips.extend(
                pair_flips(&state, &next, options.tolerance)
                    .into_iter()
                    .map(|(j, k)| PairFlip { step: i, j, k }),
            );
        }
        if i % every == 0 {
            traj.rows.push(row);
        }
        last_lr = Some(lambda);
        state = next;
    }
    traj.steps_taken = steps;
    traj.final_state = Some(state);
    Ok(traj)
}

/// First step at which every pairwise ELR ratio lies within
/// `1 + ratio_tolerance` of 1, or `None` if that does not happen within
/// `max_steps`.
pub fn convergence_horizon(
    initial: &NetworkState,
    schedule: &Schedule,
    ratio_tolerance: f64,
    max_steps: u64,
) -> Result<Option<u64>> {
    convergence_horizon_with(
        initial,
        schedule,
        ratio_tolerance,
        max_steps,
        DEFAULT_TOLERANCE,
    )
}

pub fn convergence_horizon_with(
    initial: &NetworkState,
    schedule: &Schedule,
    ratio_tolerance: f64,
    max_steps: u64,
    tolerance: f64,
) -> Result<Option<u64>> {
    if !(ratio_tolerance.is_finite() && ratio_tolerance > 0.0) {
        return Err(ModelError::config(format!(
            "ratio tolerance must be positive, got {ratio_tolerance}"
        )));
    }
    schedule.validate()?;
    let threshold = ratio_tolerance.ln_1p();
    let mut state = initial.clone();
    let mut last_lr = None;
    for i in 0..=max_steps {
        if state.max_log_ratio() <= threshold {
            return Ok(Some(i));
        }
        if i == max_steps {
            break;
        }
        let ctx = LrContext::with_state(&state)
            .last_lr(last_lr)
            .tolerance(tolerance);
        let lambda = schedule.lr_at(i, &ctx)?;
        state = step_network(&state, lambda)?;
        last_lr = Some(lambda);
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::flip_count;
    use crate::profiles::ProfileSpec;

    #[test]
    fn row_count_and_symmetry_on_uniform_network() {
        let init = ProfileSpec::uniform(4).build().unwrap();
        for schedule in [Schedule::constant(0.3), Schedule::subcritical(1.0)] {
            let t = simulate(&init, &schedule, 10).unwrap();
            assert_eq!(t.rows.len(), 11);
            assert!(t.flips.is_empty());
            for row in &t.rows {
                assert!(row.layers.windows(2).all(|w| w[0].elr == w[1].elr));
                assert!(!row.flip);
            }
        }
    }

    #[test]
    fn supercritical_two_layer_flips_once_at_step_zero() {
        let init = ProfileSpec::feedforward(2).build().unwrap();
        let kappa = critical_lr(&init);
        let t = simulate(&init, &Schedule::constant(kappa * 3.0), 200).unwrap();
        assert_eq!(t.flip_steps().collect::<Vec<_>>(), vec![0]);
        assert_eq!(flip_count(&t, None, DEFAULT_TOLERANCE).unwrap(), 1);
    }

    #[test]
    fn subcritical_warmup_converges_in_depth_steps() {
        let init = ProfileSpec::feedforward(12).build().unwrap();
        let t = simulate(&init, &Schedule::subcritical(1.0), 12).unwrap();
        assert!(t.flips.is_empty());
        let last = t.final_state.as_ref().unwrap();
        assert!(last.max_log_ratio() < 1e-12);
        let widths: Vec<f64> = t
            .rows
            .iter()
            .map(|r| (r.layers[r.argmax_elr - 1].elr / r.layers[r.argmin_elr - 1].elr).ln())
            .collect();
        assert!(widths.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn record_every_downsamples_rows_but_not_flips() {
        let init = ProfileSpec::feedforward(6).build().unwrap();
        let opts = SimOptions {
            record_every: 4,
            ..SimOptions::default()
        };
        let t = simulate_with(&init, &Schedule::constant(50.0), 10, &opts).unwrap();
        let steps: Vec<u64> = t.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 4, 8, 10]);
        assert_eq!(t.flip_steps().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn overflow_returns_partial_trajectory() {
        let init = NetworkState::from_pairs(&[(1e-300, 1e150), (1.0, 1.0)]).unwrap();
        let err = simulate(&init, &Schedule::constant(1e10), 5).unwrap_err();
        assert_eq!(err.step, 0);
        assert_eq!(err.source, ModelError::Overflow { layer: 1, step: 0 });
        assert_eq!(err.trajectory.rows.len(), 1);
    }

    #[test]
    fn pairwise_flip_log() {
        let init = ProfileSpec::feedforward(3).build().unwrap();
        let opts = SimOptions {
            pairwise_flips: true,
            ..SimOptions::default()
        };
        let t = simulate_with(&init, &Schedule::constant(100.0), 3, &opts).unwrap();
        let at_zero: Vec<_> = t
            .pair_flips
            .iter()
            .filter(|p| p.step == 0)
            .map(|p| (p.j, p.k))
            .collect();
        assert_eq!(at_zero, vec![(1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn horizon_examples() {
        let uniform = ProfileSpec::uniform(5).build().unwrap();
        assert_eq!(
            convergence_horizon(&uniform, &Schedule::constant(0.1), 1e-9, 10).unwrap(),
            Some(0)
        );
        let ff = ProfileSpec::feedforward(8).build().unwrap();
        let sub = convergence_horizon(&ff, &Schedule::subcritical(1.0), 1e-9, 100)
            .unwrap()
            .unwrap();
        assert!(sub <= 8, "{sub}");
        let tiny = convergence_horizon(&ff, &Schedule::constant(1e-3), 1e-9, 1000).unwrap();
        assert!(tiny.is_none_or(|h| h > sub));
        assert!(convergence_horizon(&ff, &Schedule::constant(1.0), 0.0, 10).is_err());
    }

    #[test]
    fn zero_steps_is_rejected() {
        let init = ProfileSpec::uniform(2).build().unwrap();
        assert!(simulate(&init, &Schedule::constant(1.0), 0).is_err());
    }
}
