use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error category, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration or caller-side precondition.
    Usage,
    /// Malformed, missing or inconsistent data.
    Data,
    /// Optimization or arithmetic produced non-finite values.
    Numerical,
}

impl ErrorClass {
    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("index {index} out of bounds for axis of length {len}")]
    Bounds { index: usize, len: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("phantom generation failed: {0}")]
    Generation(String),
    #[error("registration diverged at level {level}, iteration {iteration}; last stable parameters {last_stable:?}")]
    Divergence {
        level: usize,
        iteration: usize,
        last_stable: [f64; 12],
    },
    #[error("optimizer: non-finite gradient in parameter `{param}`")]
    Optimizer { param: String },
    #[error("non-finite loss {loss} at batch {batch}")]
    NonFiniteLoss { batch: usize, loss: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint corrupted: {0}")]
    Corruption(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Precondition(_) => ErrorClass::Usage,
            Error::Divergence { .. } | Error::Optimizer { .. } | Error::NonFiniteLoss { .. } | Error::NonFinite(_) => {
                ErrorClass::Numerical
            }
            _ => ErrorClass::Data,
        }
    }

    /// Short stable identifier for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Unsupported(_) => "unsupported",
            Error::Bounds { .. } => "bounds",
            Error::Shape(_) => "shape",
            Error::Geometry(_) => "geometry",
            Error::Config(_) => "config",
            Error::Parameter(_) => "parameter",
            Error::Precondition(_) => "precondition",
            Error::Degenerate(_) => "degenerate",
            Error::Generation(_) => "generation",
            Error::Divergence { .. } => "divergence",
            Error::Optimizer { .. } => "optimizer",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NonFinite(_) => "non_finite",
            Error::Corruption(_) => "corruption",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Json(_) => "json",
        }
    }
}
