//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("no patella label found in any slice")]
    NoPatella,

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("defect arc of {requested_mm:.1}mm exceeds available surface length {available_mm:.1}mm")]
    DefectArcTooLong { requested_mm: f64, available_mm: f64 },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("loss must be scalar, got {0} elements")]
    NonScalarLoss(usize),

    #[error("empty segment in {0}")]
    EmptySegment(&'static str),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
