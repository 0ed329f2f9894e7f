use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at step {step}: {detail}")]
    TrainingDivergence { step: usize, detail: String },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("sampler diverged at step {step}: non-finite latent")]
    SamplerDivergence { step: usize },

    #[error("attention hook contract violated at layer {layer}: {detail}")]
    HookContract { layer: usize, detail: String },

    #[error("ema state for layer {layer} changed shape from {expected:?} to {found:?}; reset the state per trajectory")]
    EmaShapeChanged {
        layer: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("singular schedule: alpha_bar is zero at step {0}")]
    SingularSchedule(usize),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by numeric blow-up rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::TrainingDivergence { .. }
                | Error::NonFiniteGradient(_)
                | Error::SamplerDivergence { .. }
        )
    }
}
