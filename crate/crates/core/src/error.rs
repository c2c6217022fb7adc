use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("image carries no capture registered with this scene")]
    UnregisteredView,
    #[error("pose lies outside free space")]
    OutsideFreeSpace,
    #[error("obstacle placement unsatisfiable after {attempts} attempts")]
    UnsatisfiablePlacement { attempts: usize },
    #[error("predictor failed: {0}")]
    Predictor(String),
    #[error("calibration diverged at step {step}")]
    Divergence { step: usize, trace: Vec<f64> },
    #[error("agent log has {found} forward frames, {needed} required")]
    InsufficientForwardFrames { needed: usize, found: usize },
    #[error("no occupied cells in either grid")]
    NoOccupiedCells,
    #[error("no mutually valid pixels")]
    NoValidPixels,
    #[error("unknown kind: {0}")]
    UnknownKind(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
