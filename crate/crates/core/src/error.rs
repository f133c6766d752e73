use std::path::PathBuf;

/// Errors raised anywhere in the workbench.
///
/// Variants fall into two classes, see [`Error::is_numerical`]: invalid input
/// (bad configs, malformed files, failed quality gates) and numerical failure
/// (simulator instability, singular systems, non-finite values).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown indenter kind or id `{0}`")]
    UnknownIndenter(String),

    #[error("time step {dt:.3e} s exceeds the stable limit {max_dt:.3e} s")]
    Cfl { dt: f64, max_dt: f64 },

    #[error("simulation became unstable at step {step}{}", frame.map(|f| format!(" (frame {f})")).unwrap_or_default())]
    Unstable { step: u64, frame: Option<usize> },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed image: {0}")]
    Image(String),

    #[error("tracking failed: matched fraction {matched_fraction:.3} below {min:.3}")]
    Tracking { matched_fraction: f64, min: f64 },

    #[error("quality gate failed: {found} markers, need {required}")]
    QualityGate {
        found: usize,
        required: usize,
        partial: Box<crate::imaging::BinaryImage>,
    },

    #[error("manifest validation failed: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Unstable { .. } | Error::Singular(_) | Error::NonFinite(_)
        )
    }
}
