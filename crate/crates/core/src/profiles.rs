//! Initial states reproducing initialization-time gradient magnitude profiles.
//!
//! Layers are numbered `1..=L` from the input upwards. The topmost layer is
//! pinned to `c_L = 1`; only ratios between layers matter, any global scale
//! folds into the learning rate.

use serde::{Deserialize, Serialize};

use crate::dynamics::{LayerState, NetworkState};
use crate::error::{ModelError, Result};

/// Gradient growth factor per layer for ReLU networks with He initialisation,
/// `sqrt(pi / (pi - 1))`.
pub fn default_alpha() -> f64 {
    let pi = std::f64::consts::PI;
    (pi / (pi - 1.0)).sqrt()
}

fn default_sigma_sq() -> f64 {
    2.0
}

fn default_block_size() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    /// `c_i = alpha^(L - i)`: exponential in depth.
    Feedforward,
    /// `c_i = 1 + floor((L - i) / s) * alpha^s`: linear in depth.
    Resnet,
    /// `c_i = 1` for every layer.
    Uniform,
    /// User-supplied base gradients (and optionally weight norms).
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub kind: ProfileKind,
    /// Number of layers. Optional for explicit profiles, where it defaults to
    /// the length of `explicit_c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Layers per residual block (resnet only).
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default = "default_sigma_sq")]
    pub initial_sigma_sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_c: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_sigma_sq: Option<Vec<f64>>,
}

impl ProfileSpec {
    fn with_kind(kind: ProfileKind, depth: usize) -> Self {
        Self {
            kind,
            depth: Some(depth),
            alpha: default_alpha(),
            block_size: default_block_size(),
            initial_sigma_sq: default_sigma_sq(),
            explicit_c: None,
            explicit_sigma_sq: None,
        }
    }

    pub fn feedforward(depth: usize) -> Self {
        Self::with_kind(ProfileKind::Feedforward, depth)
    }

    pub fn resnet(depth: usize, block_size: usize) -> Self {
        Self {
            block_size,
            ..Self::with_kind(ProfileKind::Resnet, depth)
        }
    }

    pub fn uniform(depth: usize) -> Self {
        Self::with_kind(ProfileKind::Uniform, depth)
    }

    pub fn explicit(c: Vec<f64>) -> Self {
        Self {
            depth: None,
            explicit_c: Some(c),
            ..Self::with_kind(ProfileKind::Explicit, 0)
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_initial_sigma_sq(mut self, sigma_sq: f64) -> Self {
        self.initial_sigma_sq = sigma_sq;
        self
    }

    /// Number of layers the profile describes.
    pub fn depth(&self) -> Result<usize> {
        let depth = match (self.kind, self.depth, &self.explicit_c) {
            (ProfileKind::Explicit, None, Some(c)) => c.len(),
            (_, Some(d), _) => d,
            (_, None, _) => return Err(ModelError::config("profile depth is required")),
        };
        if depth == 0 {
            return Err(ModelError::config("profile depth must be at least 1"));
        }
        Ok(depth)
    }

    fn validate_common(&self) -> Result<usize> {
        let depth = self.depth()?;
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(ModelError::config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.initial_sigma_sq.is_finite() && self.initial_sigma_sq > 0.0) {
            return Err(ModelError::config(format!(
                "initial_sigma_sq must be positive, got {}",
                self.initial_sigma_sq
            )));
        }
        Ok(depth)
    }

    fn expect_kind(&self, kind: ProfileKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(ModelError::config(format!(
                "expected a {kind:?} profile, got {:?}",
                self.kind
            )))
        }
    }

    /// Builds the initial state for whichever kind is named.
    pub fn build(&self) -> Result<NetworkState> {
        match self.kind {
            ProfileKind::Feedforward => feedforward_profile(self),
            ProfileKind::Resnet => resnet_profile(self),
            ProfileKind::Uniform => uniform_profile(self),
            ProfileKind::Explicit => explicit_profile(self),
        }
    }
}

fn uniform_sigma_state(cs: impl Iterator<Item = f64>, sigma_sq: f64) -> Result<NetworkState> {
    let layers = cs
        .map(|c| LayerState::new(sigma_sq, c))
        .collect::<Result<Vec<_>>>()?;
    NetworkState::new(layers)
}

pub fn feedforward_profile(spec: &ProfileSpec) -> Result<NetworkState> {
    spec.expect_kind(ProfileKind::Feedforward)?;
    let depth = spec.validate_common()?;
    let exponent =
        |i: usize| i32::try_from(depth - i).map_err(|_| ModelError::config("depth too large"));
    let cs = (1..=depth)
        .map(|i| exponent(i).map(|e| spec.alpha.powi(e)))
        .collect::<Result<Vec<_>>>()?;
    uniform_sigma_state(cs.into_iter(), spec.initial_sigma_sq)
}

pub fn resnet_profile(spec: &ProfileSpec) -> Result<NetworkState> {
    spec.expect_kind(ProfileKind::Resnet)?;
    let depth = spec.validate_common()?;
    let s = spec.block_size;
    if s == 0 {
        return Err(ModelError::config("block_size must be at least 1"));
    }
    let block_gain = spec
        .alpha
        .powi(i32::try_from(s).map_err(|_| ModelError::config("block_size too large"))?);
    let cs = (1..=depth).map(|i| 1.0 + ((depth - i) / s) as f64 * block_gain);
    uniform_sigma_state(cs, spec.initial_sigma_sq)
}

pub fn uniform_profile(spec: &ProfileSpec) -> Result<NetworkState> {
    spec.expect_kind(ProfileKind::Uniform)?;
    let depth = spec.validate_common()?;
    uniform_sigma_state(std::iter::repeat_n(1.0, depth), spec.initial_sigma_sq)
}

pub fn explicit_profile(spec: &ProfileSpec) -> Result<NetworkState> {
    spec.expect_kind(ProfileKind::Explicit)?;
    let depth = spec.validate_common()?;
    let cs = spec
        .explicit_c
        .as_ref()
        .ok_or_else(|| ModelError::config("explicit profile needs explicit_c"))?;
    if cs.len() != depth {
        return Err(ModelError::config(format!(
            "explicit_c has {} entries but depth is {depth}",
            cs.len()
        )));
    }
    let sigmas = match &spec.explicit_sigma_sq {
        Some(s) if s.len() != depth => {
            return Err(ModelError::config(format!(
                "explicit_sigma_sq has {} entries but depth is {depth}",
                s.len()
            )))
        }
        Some(s) => s.clone(),
        None => vec![spec.initial_sigma_sq; depth],
    };
    let layers = cs
        .iter()
        .zip(&sigmas)
        .enumerate()
        .map(|(i, (&c, &s))| {
            LayerState::new(s, c).map_err(|e| ModelError::config(format!("layer {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    NetworkState::new(layers)
}
