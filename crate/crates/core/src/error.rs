use thiserror::Error;

/// Errors raised by the dynamics model, schedules and simulators.
///
/// Layer indices are 1-based throughout, matching the layer numbering used by
/// profiles and emitted files.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite weight norm in layer {layer} at step {step}")]
    Overflow { layer: usize, step: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

impl ModelError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        ModelError::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        ModelError::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
