//! Deterministic expectation model of layer-wise weight norm growth.
//!
//! Each scale-invariant layer is summarised by its expected squared weight
//! norm `sigma_sq` and a constant base gradient magnitude `c`. One SGD step
//! with learning rate `lambda` advances the layer as
//!
//! ```text
//! sigma_sq' = sigma_sq + lambda^2 * c^2 / sigma_sq
//! ```
//!
//! and the effective learning rate (ELR) of the layer is `c / sigma_sq`.
//! Layers evolve independently, so a network is just an ordered list of them.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Default relative tolerance used for equality decisions on ELRs.
pub const DEFAULT_TOLERANCE: f64 = 1e-12;

/// He initialisation gives an expected squared weight norm of 2, hence `k0 = 2^2`.
pub const DEFAULT_K0: f64 = 4.0;

/// Expected squared weight norm and base gradient of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    sigma_sq: f64,
    c: f64,
}

impl LayerState {
    pub fn new(sigma_sq: f64, c: f64) -> Result<Self> {
        if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
            return Err(ModelError::config(format!(
                "squared weight norm must be positive and finite, got {sigma_sq}"
            )));
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(ModelError::config(format!(
                "base gradient must be positive and finite, got {c}"
            )));
        }
        Ok(Self { sigma_sq, c })
    }

    #[inline]
    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    #[inline]
    pub fn sigma(&self) -> f64 {
        self.sigma_sq.sqrt()
    }

    #[inline]
    pub fn c(&self) -> f64 {
        self.c
    }

    /// Expected gradient norm `c / sigma` under the inverse-scaling property.
    #[inline]
    pub fn grad_norm(&self) -> f64 {
        self.c / self.sigma()
    }

    #[inline]
    pub fn elr(&self) -> f64 {
        self.c / self.sigma_sq
    }

    /// Advances the layer by one step; `None` if the result is not finite.
    #[inline]
    fn advance(&self, lambda: f64) -> Option<Self> {
        let next = self.sigma_sq + lambda * lambda * self.c * self.c / self.sigma_sq;
        next.is_finite().then_some(Self {
            sigma_sq: next,
            c: self.c,
        })
    }
}

/// Ordered layers (index 1 is the lowest layer) plus the simulation clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    layers: Vec<LayerState>,
    step_index: u64,
    elapsed_time: f64,
}

impl NetworkState {
    pub fn new(layers: Vec<LayerState>) -> Result<Self> {
        if layers.is_empty() {
            return Err(ModelError::config("a network needs at least one layer"));
        }
        Ok(Self {
            layers,
            step_index: 0,
            elapsed_time: 0.0,
        })
    }

    /// Builds a state from `(sigma_sq, c)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let layers = pairs
            .iter()
            .map(|&(s, c)| LayerState::new(s, c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    #[inline]
    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    /// Layer by 1-based index.
    pub fn layer(&self, index: usize) -> Option<&LayerState> {
        index.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    #[inline]
    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    /// Accumulated sum of squared learning rates over all steps taken.
    #[inline]
    pub fn elapsed_time(&self) -> f64 {
        self.elapsed_time
    }

    pub fn elrs(&self) -> Vec<f64> {
        self.layers.iter().map(LayerState::elr).collect()
    }

    /// 0-based positions of the lowest- and highest-ELR layers.
    /// Ties go to the lowest index.
    pub fn extreme_positions(&self) -> (usize, usize) {
        let mut lo = 0;
        let mut hi = 0;
        let mut e_lo = self.layers[0].elr();
        let mut e_hi = e_lo;
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let e = layer.elr();
            if e < e_lo {
                lo = i;
                e_lo = e;
            }
            if e > e_hi {
                hi = i;
                e_hi = e;
            }
        }
        (lo, hi)
    }

    /// `ln(E_max / E_min)`, i.e. the largest pairwise `|ln R|`.
    pub fn max_log_ratio(&self) -> f64 {
        let (lo, hi) = self.extreme_positions();
        (self.layers[hi].elr() / self.layers[lo].elr()).ln()
    }
}

/// Constants of the continuous (gradient-flow) model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k0: f64,
    pub numeric_tolerance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k0: DEFAULT_K0,
            numeric_tolerance: DEFAULT_TOLERANCE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k0.is_finite() && self.k0 > 0.0) {
            return Err(ModelError::config(format!(
                "k0 must be positive, got {}",
                self.k0
            )));
        }
        if !(self.numeric_tolerance.is_finite() && self.numeric_tolerance > 0.0) {
            return Err(ModelError::config(format!(
                "numeric_tolerance must be positive, got {}",
                self.numeric_tolerance
            )));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(ModelError::contract(format!(
            "learning rate must be positive and finite, got {lambda}"
        )))
    }
}

/// One step of the discrete model for a single layer.
///
/// A standalone overflow is reported as layer 1, step 0; [`step_network`]
/// reports the real position.
pub fn discrete_step(layer: &LayerState, lambda: f64) -> Result<LayerState> {
    check_lambda(lambda)?;
    layer
        .advance(lambda)
        .ok_or(ModelError::Overflow { layer: 1, step: 0 })
}

/// Advances every layer of `state` by one step with the same learning rate.
pub fn step_network(state: &NetworkState, lambda: f64) -> Result<NetworkState> {
    check_lambda(lambda)?;
    let layers = state
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            layer.advance(lambda).ok_or(ModelError::Overflow {
                layer: i + 1,
                step: state.step_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let elapsed_time = state.elapsed_time + lambda * lambda;
    if !elapsed_time.is_finite() {
        return Err(ModelError::Overflow {
            layer: 1,
            step: state.step_index,
        });
    }
    Ok(NetworkState {
        layers,
        step_index: state.step_index + 1,
        elapsed_time,
    })
}

/// Gradient-flow solution `sqrt(2 c^2 t + k0)`.
pub fn continuous_sigma_sq(c: f64, t: f64, config: &ModelConfig) -> f64 {
    (2.0 * c * c * t + config.k0).sqrt()
}

/// Gradient-flow ELR ratio of two layers with base gradients `c_j`, `c_k`.
pub fn continuous_elr_ratio(c_j: f64, c_k: f64, t: f64, config: &ModelConfig) -> f64 {
    (c_j * continuous_sigma_sq(c_k, t, config)) / (c_k * continuous_sigma_sq(c_j, t, config))
}

#[inline]
pub fn elr(layer: &LayerState) -> f64 {
    layer.elr()
}

/// `E_j / E_k`.
#[inline]
pub fn elr_ratio(j: &LayerState, k: &LayerState) -> f64 {
    (j.c * k.sigma_sq) / (k.c * j.sigma_sq)
}

/// The learning rate at which the ELR ordering of `j` and `k` reverses in
/// one step: `sigma_j sigma_k / sqrt(c_j c_k) = 1 / sqrt(E_j E_k)`.
#[inline]
pub fn flipping_ratio(j: &LayerState, k: &LayerState) -> f64 {
    ((j.sigma_sq / j.c) * (k.sigma_sq / k.c)).sqrt()
}

/// Flipping ratio of the lowest- and highest-ELR layers.
///
/// For a single layer (or all layers equal) this degrades to `sigma_sq / c`.
pub fn critical_lr(state: &NetworkState) -> f64 {
    let (lo, hi) = state.extreme_positions();
    flipping_ratio(&state.layers[lo], &state.layers[hi])
}

/// Flipping ratio of the two highest ELR levels, using [`DEFAULT_TOLERANCE`].
pub fn subcritical_lr(state: &NetworkState) -> Result<f64> {
    subcritical_lr_with(state, DEFAULT_TOLERANCE)
}

/// 0-based positions `(h, h')` of the highest-ELR layer and the highest-ELR
/// layer at a distinct level below it.
///
/// Layers whose ELR lies within `tolerance` (in log space) of the maximum
/// count as the same level: once the warm-up has merged two layers they stay
/// merged, and the next step must pull in the next level down. `h'` is
/// `None` when every layer sits at the top level.
pub fn top_two_levels(state: &NetworkState, tolerance: f64) -> (usize, Option<usize>) {
    let (_, hi) = state.extreme_positions();
    let e_hi = state.layers[hi].elr();
    let mut second: Option<(usize, f64)> = None;
    for (i, layer) in state.layers.iter().enumerate() {
        let e = layer.elr();
        if (e_hi / e).ln() <= tolerance {
            continue;
        }
        match second {
            Some((_, best)) if e <= best => {}
            _ => second = Some((i, e)),
        }
    }
    (hi, second.map(|(i, _)| i))
}

/// Learning rate of the subcritical warm-up: the flipping ratio of the two
/// highest ELR levels. When all layers share one level it is `1 / E`.
pub fn subcritical_lr_with(state: &NetworkState, tolerance: f64) -> Result<f64> {
    if state.len() < 2 {
        return Err(ModelError::config(
            "subcritical learning rate needs at least two layers",
        ));
    }
    let (h, h2) = top_two_levels(state, tolerance);
    let top = &state.layers[h];
    Ok(match h2 {
        Some(k) => flipping_ratio(top, &state.layers[k]),
        None => flipping_ratio(top, top),
    })
}

/// Sign of `ln R` with a dead zone of width `tolerance` around zero.
#[inline]
pub fn log_ratio_sign(log_ratio: f64, tolerance: f64) -> i8 {
    if log_ratio > tolerance {
        1
    } else if log_ratio < -tolerance {
        -1
    } else {
        0
    }
}
