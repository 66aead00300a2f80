use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error taxonomy shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents do not line up for an operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is structurally invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation that requires at least one element received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A NaN or infinity was produced or supplied where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The counting arena was queried while no measurement session is active.
    #[error("memory instrumentation not active: {0}")]
    Instrumentation(&'static str),

    /// The reverse diffusion trajectory produced a non-finite state.
    #[error("sampler diverged at step {step}: {detail}")]
    SamplerDiverged { step: usize, detail: String },

    /// A checkpoint file is malformed or incomplete.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
