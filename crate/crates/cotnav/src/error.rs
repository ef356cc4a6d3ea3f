use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no path between the requested cells")]
    NoPath,
    #[error("no free cell within {radius} m of waypoint ({x:.2}, {y:.2})")]
    Blocked { x: f64, y: f64, radius: f64 },
    #[error("unknown instance id {0}")]
    UnknownInstance(i64),
    #[error("invalid placement: {0}")]
    InvalidPlacement(String),
    #[error("scene config rejected: {0}")]
    BadConfig(String),
    #[error("scene does not have enough instances: need {need}, have {have}")]
    InsufficientInstances { need: usize, have: usize },
    #[error("schema error at {path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("context exceeds the token cap even after truncation ({len} > {cap})")]
    ContextOverflow { len: usize, cap: usize },
    #[error("malformed chain-of-thought sequence: {0}")]
    MalformedSequence(String),
    #[error("target sequence has no trajectory to supervise navigation")]
    LabelError,
    #[error("logits shape does not match target sequence: {0}")]
    ShapeError(String),
    #[error("sampling group {0} has no samples")]
    EmptyGroup(&'static str),
    #[error("training loss became non-finite at step {0}")]
    Divergence(usize),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("missing tasks: {0}")]
    MissingTasks(String),
    #[error("parameter archive corrupt: {0}")]
    BadArchive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
