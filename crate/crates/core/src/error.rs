use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Named violations reported by configuration validation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("points_per_level has {config} entries but the pyramid has {pyramid} levels")]
    LevelCountMismatch { config: usize, pyramid: usize },
    #[error("channel count {channels} is not divisible by {heads} heads")]
    HeadDivisibility { channels: usize, heads: usize },
    #[error("point budget is empty (sum of points_per_level is 0)")]
    EmptyPointBudget,
    #[error("head count must be at least 1")]
    NoHeads,
    #[error("embed_dim {embed_dim} does not match pyramid channels {channels}")]
    EmbedDimMismatch { embed_dim: usize, channels: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged: loss {loss}")]
    Divergence { loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
