use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trace error at row {row}: {reason}")]
    TraceRow { row: usize, reason: String },

    #[error("{value} lies outside the grid [{min}, {max}]")]
    OutOfGrid { value: f64, min: f64, max: f64 },

    #[error("visibility undefined: total probe photoluminescence is zero")]
    UndefinedVisibility,

    #[error("ground-manifold population is zero")]
    ZeroGroundPopulation,

    #[error("not enough data points ({points}) for {free} free parameters")]
    InsufficientData { points: usize, free: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name: name.into(), reason: reason.into() }
    }

    /// True for failures of the numerics (integration, fitting, FFT) rather
    /// than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::UndefinedVisibility | Error::ZeroGroundPopulation)
    }
}
