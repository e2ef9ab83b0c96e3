use alloc::string::String;

use crate::nn::NnError;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum GilError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("non-finite {component} at step {step}")]
    Numeric { component: String, step: usize },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = GilError> = core::result::Result<T, E>;

/// Attach a training component and step index to non-finite failures.
pub(crate) fn at_step<T, E: Into<GilError>>(r: Result<T, E>, component: &str, step: usize) -> Result<T> {
    r.map_err(|e| match e.into() {
        GilError::Nn(NnError::NonFinite { .. } | NnError::NonFiniteGradient { .. }) => {
            GilError::Numeric { component: component.into(), step }
        }
        other => other,
    })
}
