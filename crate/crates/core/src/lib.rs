//! Layer-wise effective learning rate (ELR) dynamics of networks whose
//! layers are followed by normalisation.
//!
//! * [`dynamics`]: the deterministic expectation model, its gradient-flow
//!   limit, ELR ratios, flipping ratios and critical learning rates.
//! * [`profiles`]: initial gradient-magnitude profiles (feedforward, ResNet).
//! * [`schedule`] and [`simulate`]: learning-rate policies, including the
//!   state-feedback subcritical warm-up, and the trajectory driver.
//! * [`stochastic`]: Monte Carlo simulation with random weight matrices.
//! * [`metrics`]: spread and flip statistics.
//!
//! Layer indices exposed in reports and records are 1-based, with layer 1
//! closest to the input.

pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod profiles;
pub mod scenario;
pub mod schedule;
pub mod simulate;
pub mod stochastic;

pub use dynamics::{
    continuous_elr_ratio, continuous_sigma_sq, critical_lr, discrete_step, elr, elr_ratio,
    flipping_ratio, step_network, subcritical_lr, subcritical_lr_with, LayerState, ModelConfig,
    NetworkState,
};
pub use error::{ModelError, Result};
pub use metrics::{flip_count, s_rel, spread_report, SpreadReport};
pub use profiles::{ProfileKind, ProfileSpec};
pub use schedule::{LrContext, Schedule};
pub use simulate::{
    convergence_horizon, simulate, simulate_with, SimOptions, SimulationFailure, Trajectory,
};
pub use stochastic::{mc_ensemble, ConstrainPolicy, Ensemble, MatrixLayer, McConfig};
