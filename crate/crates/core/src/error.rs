use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("node does not belong to this graph or has no differentiable path")]
    DetachedGraph,

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("point {index} is behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("degenerate projection: {0}")]
    DegenerateProjection(String),

    #[error("timestep {t} outside schedule of {steps} steps")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("invalid patch configuration: {0}")]
    PatchConfigInvalid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("weight archive version {found}, expected {expected}")]
    FormatVersionMismatch { found: u32, expected: u32 },

    #[error("corrupt weight archive: {0}")]
    CorruptHeader(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch { op, detail: detail.into() }
}
