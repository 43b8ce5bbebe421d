//! Learning-rate policies.
//!
//! Every kind except the subcritical warm-up is a pure function of the step
//! index. The subcritical warm-up is a state-feedback rule: at each step it
//! returns `rho` times the flipping ratio of the two highest ELR levels of
//! the current network state.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dynamics::{subcritical_lr_with, NetworkState, DEFAULT_TOLERANCE};
use crate::error::{ModelError, Result};

fn one() -> f64 {
    1.0
}
fn default_final_div() -> f64 {
    1e4
}
fn default_warmup_div() -> f64 {
    1e3
}
fn default_pct_start() -> f64 {
    0.3
}
fn default_div_factor() -> f64 {
    25.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anneal {
    Linear,
    #[default]
    Cos,
}

impl Anneal {
    /// Interpolates from `start` to `end` as `progress` goes 0 -> 1.
    fn interpolate(self, start: f64, end: f64, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        match self {
            Anneal::Linear => start + (end - start) * p,
            Anneal::Cos => end + (start - end) * 0.5 * (1.0 + (PI * p).cos()),
        }
    }
}

/// One segment of a [`Schedule::Composite`]. Step indices inside the segment
/// restart at 0. Only the last phase may omit `steps`; it then runs forever,
/// as does the last phase when every phase is bounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub schedule: Schedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        lr: f64,
    },
    /// `lr * gamma^(number of milestones <= step)`.
    Multistep {
        lr: f64,
        gamma: f64,
        milestones: Vec<u64>,
    },
    /// Cosine decay from `peak_lr` to `peak_lr / final_div` over `total_steps`,
    /// then held.
    Cosine {
        peak_lr: f64,
        total_steps: u64,
        #[serde(default = "default_final_div")]
        final_div: f64,
    },
    /// Linear ramp from `peak_lr / div_factor` to `peak_lr` over
    /// `warmup_steps`, then held.
    LinearWarmup {
        peak_lr: f64,
        warmup_steps: u64,
        #[serde(default = "default_warmup_div")]
        div_factor: f64,
    },
    /// Ramp from `max_lr / div_factor` up to `max_lr` during the first
    /// `pct_start` of `total_steps`, then cosine decay down to
    /// `max_lr / (div_factor * final_div_factor)`.
    OneCycle {
        max_lr: f64,
        total_steps: u64,
        #[serde(default = "default_pct_start")]
        pct_start: f64,
        #[serde(default = "default_div_factor")]
        div_factor: f64,
        #[serde(default = "default_final_div")]
        final_div_factor: f64,
        #[serde(default)]
        anneal: Anneal,
    },
    /// State-feedback warm-up. Runs for `warmup_steps` (default: number of
    /// layers), then hands over to `then` (step index restarted at 0) or,
    /// without a follow-on, holds the last learning rate.
    SubcriticalWarmup {
        #[serde(default = "one")]
        safety_factor: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warmup_steps: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        then: Option<Box<Schedule>>,
    },
    Composite {
        phases: Vec<Phase>,
    },
}

/// Inputs for evaluating a schedule at one step.
#[derive(Debug, Clone, Copy)]
pub struct LrContext<'a> {
    /// Current network state; required by the subcritical warm-up.
    pub state: Option<&'a NetworkState>,
    /// Learning rate used at the previous step, if any.
    pub last_lr: Option<f64>,
    /// Tolerance under which two ELRs are treated as one level.
    pub tolerance: f64,
}

impl<'a> LrContext<'a> {
    pub fn stateless() -> Self {
        Self {
            state: None,
            last_lr: None,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    pub fn with_state(state: &'a NetworkState) -> Self {
        Self {
            state: Some(state),
            ..Self::stateless()
        }
    }

    pub fn last_lr(mut self, lr: Option<f64>) -> Self {
        self.last_lr = lr;
        self
    }

    pub fn tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ModelError::config(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Schedule::Constant { lr }
    }

    pub fn subcritical(safety_factor: f64) -> Self {
        Schedule::SubcriticalWarmup {
            safety_factor,
            warmup_steps: None,
            then: None,
        }
    }

    /// Short kind name as used in config files.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Schedule::Constant { .. } => "constant",
            Schedule::Multistep { .. } => "multistep",
            Schedule::Cosine { .. } => "cosine",
            Schedule::LinearWarmup { .. } => "linear_warmup",
            Schedule::OneCycle { .. } => "one_cycle",
            Schedule::SubcriticalWarmup { .. } => "subcritical_warmup",
            Schedule::Composite { .. } => "composite",
        }
    }

    /// Whether evaluating this schedule may need a network state.
    pub fn needs_state(&self) -> bool {
        match self {
            Schedule::SubcriticalWarmup { .. } => true,
            Schedule::Composite { phases } => phases.iter().any(|p| p.schedule.needs_state()),
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant { lr } => positive("lr", *lr),
            Schedule::Multistep {
                lr,
                gamma,
                milestones,
            } => {
                positive("lr", *lr)?;
                positive("gamma", *gamma)?;
                if milestones.windows(2).any(|w| w[0] > w[1]) {
                    return Err(ModelError::config("milestones must be sorted"));
                }
                Ok(())
            }
            Schedule::Cosine {
                peak_lr,
                total_steps,
                final_div,
            } => {
                positive("peak_lr", *peak_lr)?;
                positive("final_div", *final_div)?;
                if *total_steps == 0 {
                    return Err(ModelError::config("cosine total_steps must be at least 1"));
                }
                Ok(())
            }
            Schedule::LinearWarmup {
                peak_lr,
                div_factor,
                ..
            } => {
                positive("peak_lr", *peak_lr)?;
                positive("div_factor", *div_factor)
            }
            Schedule::OneCycle {
                max_lr,
                total_steps,
                pct_start,
                div_factor,
                final_div_factor,
                ..
            } => {
                positive("max_lr", *max_lr)?;
                positive("div_factor", *div_factor)?;
                positive("final_div_factor", *final_div_factor)?;
                if !(0.0..=1.0).contains(pct_start) {
                    return Err(ModelError::config(format!(
                        "pct_start must lie in [0, 1], got {pct_start}"
                    )));
                }
                if *total_steps == 0 {
                    return Err(ModelError::config(
                        "one_cycle total_steps must be at least 1",
                    ));
                }
                Ok(())
            }
            Schedule::SubcriticalWarmup {
                safety_factor,
                then,
                ..
            } => {
                if !(safety_factor.is_finite() && *safety_factor > 0.0 && *safety_factor <= 1.0) {
                    return Err(ModelError::config(format!(
                        "safety_factor must lie in (0, 1], got {safety_factor}"
                    )));
                }
                then.as_ref().map_or(Ok(()), |s| s.validate())
            }
            Schedule::Composite { phases } => {
                if phases.is_empty() {
                    return Err(ModelError::config(
                        "composite schedule needs at least one phase",
                    ));
                }
                for (i, phase) in phases.iter().enumerate() {
                    if phase.steps.is_none() && i + 1 != phases.len() {
                        return Err(ModelError::config(
                            "only the last composite phase may be unbounded",
                        ));
                    }
                    phase.schedule.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Learning rate for `step`.
    pub fn lr_at(&self, step: u64, ctx: &LrContext<'_>) -> Result<f64> {
        let lr = match self {
            Schedule::Constant { lr } => *lr,
            Schedule::Multistep {
                lr,
                gamma,
                milestones,
            } => {
                let passed = milestones.iter().filter(|&&m| m <= step).count();
                lr * gamma.powi(passed as i32)
            }
            Schedule::Cosine {
                peak_lr,
                total_steps,
                final_div,
            } => {
                let progress = step as f64 / *total_steps as f64;
                Anneal::Cos.interpolate(*peak_lr, peak_lr / final_div, progress)
            }
            Schedule::LinearWarmup {
                peak_lr,
                warmup_steps,
                div_factor,
            } => {
                if step >= *warmup_steps {
                    *peak_lr
                } else {
                    let progress = step as f64 / *warmup_steps as f64;
                    Anneal::Linear.interpolate(peak_lr / div_factor, *peak_lr, progress)
                }
            }
            Schedule::OneCycle {
                max_lr,
                total_steps,
                pct_start,
                div_factor,
                final_div_factor,
                anneal,
            } => {
                let initial = max_lr / div_factor;
                let min_lr = initial / final_div_factor;
                let up = ((pct_start * *total_steps as f64).round() as u64).min(*total_steps);
                if step < up {
                    anneal.interpolate(initial, *max_lr, step as f64 / up as f64)
                } else {
                    let down = (*total_steps - up).max(1);
                    Anneal::Cos.interpolate(*max_lr, min_lr, (step - up) as f64 / down as f64)
                }
            }
            Schedule::SubcriticalWarmup {
                safety_factor,
                warmup_steps,
                then,
            } => {
                let warmup = match (warmup_steps, ctx.state) {
                    (Some(w), _) => *w,
                    (None, Some(state)) => state.len() as u64,
                    (None, None) => return Err(missing_state()),
                };
                if step >= warmup {
                    if let Some(next) = then {
                        return next.lr_at(step - warmup, ctx);
                    }
                    if let Some(last) = ctx.last_lr {
                        return Ok(last);
                    }
                }
                let state = ctx.state.ok_or_else(missing_state)?;
                safety_factor * subcritical_lr_with(state, ctx.tolerance)?
            }
            Schedule::Composite { phases } => {
                let mut start = 0u64;
                for (i, phase) in phases.iter().enumerate() {
                    let last = i + 1 == phases.len();
                    match phase.steps {
                        Some(n) if !last && step >= start + n => start += n,
                        _ => return phase.schedule.lr_at(step - start, ctx),
                    }
                }
                return Err(ModelError::config(
                    "composite schedule needs at least one phase",
                ));
            }
        };
        if lr.is_finite() && lr > 0.0 {
            Ok(lr)
        } else {
            Err(ModelError::contract(format!(
                "{} schedule produced invalid learning rate {lr} at step {step}",
                self.kind_name()
            )))
        }
    }
}

fn missing_state() -> ModelError {
    ModelError::contract("subcritical warm-up needs the current network state")
}
