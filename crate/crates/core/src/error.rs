//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: incompatible grids, bad parameter values,
    /// malformed config files.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input outside the mathematical domain of an operation
    /// (negative value under a square root, |rho| >= 1, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed: singular system, indefinite matrix,
    /// non-finite intermediate value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An iterative method exhausted its budget without converging.
    /// `trace` carries per-iteration diagnostics for the error report.
    #[error("did not converge: {message}")]
    NonConvergence { message: String, trace: Vec<String> },

    /// A query point falls outside the triangulated domain.
    #[error("point ({x}, {y}) lies outside the mesh")]
    PointOutsideMesh { x: f64, y: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Malformed content in an otherwise readable file.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
