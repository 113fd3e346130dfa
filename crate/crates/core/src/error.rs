use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("frame mismatch: expected {expected} features, got {actual}")]
    FrameMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("point ({x}, {y}) lies outside the BEV range")]
    OutOfRange { x: f64, y: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: &'static str },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
