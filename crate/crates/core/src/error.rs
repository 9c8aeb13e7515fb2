use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("unsupported schema version {found} (expected {expected})")]
    Schema { found: u32, expected: u32 },
    #[error("pose ({x:.3}, {y:.3}) lies outside the grid extent")]
    OutsideGrid { x: f64, y: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training did not improve: best return {best:.6} <= initial {initial:.6}")]
    NoImprovement { initial: f64, best: f64 },
    #[error("malformed map file: {0}")]
    MapFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
