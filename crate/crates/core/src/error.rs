use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class reported by the command line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numeric,
    Io,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Numeric => "numeric",
            Category::Io => "io",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value at index {index} of {what}")]
    NonFinite { what: &'static str, index: usize },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("imaginary residue {residue:.3e} exceeds tolerance {tolerance:.0e}; spectrum is not Hermitian")]
    ImaginaryResidue { residue: f64, tolerance: f64 },

    #[error("negative amplitude {value} at index {index}")]
    NegativeAmplitude { index: usize, value: f64 },

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(&'static str),

    #[error("empty domain(s): {}", .0.join(", "))]
    EmptyDomain(Vec<String>),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("degenerate embedding: row {row} has norm {norm:.3e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("training diverged at epoch {epoch} step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config { .. } | Error::Unknown { .. } => Category::Config,
            Error::NonFinite { .. }
            | Error::ImaginaryResidue { .. }
            | Error::NegativeAmplitude { .. }
            | Error::UndefinedStatistic(_)
            | Error::DegenerateEmbedding { .. }
            | Error::Divergence { .. } => Category::Numeric,
            Error::Io { .. } | Error::Checkpoint(_) | Error::Serde(_) => Category::Io,
            Error::Shape(_)
            | Error::OutOfRange(_)
            | Error::EmptyDomain(_)
            | Error::Dataset(_)
            | Error::Image { .. } => Category::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
