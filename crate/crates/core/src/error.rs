use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, BaeError>;

#[derive(Debug, Error)]
pub enum BaeError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("linear solve did not reach tolerance (relative residual {residual:e})")]
    Solver { residual: f64 },
    #[error("measurement error: {0}")]
    Measurement(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("non-finite data: {0}")]
    Data(String),
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate sensitivity: {0}")]
    DegenerateSensitivity(String),
    #[error("source amplitude {amplitude} below floor {floor}")]
    LowAmplitude { amplitude: f64, floor: f64 },
    #[error("polynomial mean fit is ill-conditioned (condition number {condition:e})")]
    IllConditioned { condition: f64 },
    #[error("store error: {0}")]
    Store(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BaeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BaeError::Io {
            path: path.into(),
            source,
        }
    }
}
