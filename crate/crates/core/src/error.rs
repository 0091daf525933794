use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("computation graph already consumed by a backward pass")]
    GraphConsumed,
    #[error("non-finite gradient for parameter `{param}`; step rejected")]
    NonFiniteGradient { param: String },
    #[error("target time {t} precedes the time origin {t0}; backward integration is unsupported")]
    BackwardTime { t: f64, t0: f64 },
    #[error("no target times requested")]
    EmptyGrid,
    #[error("invalid solver step {0}; must be finite and positive")]
    InvalidStep(f64),
    #[error("integration diverged at step {step}{}", row.map(|r| format!(" (batch row {r})")).unwrap_or_default())]
    Divergence { step: usize, row: Option<usize> },
    #[error("context set is empty; request prior mode explicitly")]
    EmptyContext,
    #[error("y0-only initial-state inference requested but the context has no point at t0 = {t0}")]
    MissingY0 { t0: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("series has {available} points but {needed} are required")]
    InsufficientPoints { needed: usize, available: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("generated series violates positivity at sample {index}")]
    Positivity { index: usize },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
