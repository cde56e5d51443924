use thiserror::Error;

use crate::handeye::DegeneracyReport;

pub type Result<T, E = CalibError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("quaternion is not unit length (norm {0})")]
    NonUnitQuaternion(f64),
    #[error("point projects behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("degenerate segment: endpoints coincide")]
    DegenerateSegment,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("sequence length mismatch: {lidar} lidar motions vs {camera} camera motions")]
    LengthMismatch { lidar: usize, camera: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("degenerate motion (pure translation: {}, single axis: {})", .0.pure_translation, .0.single_axis)]
    Degenerate(DegeneracyReport),
    #[error("rank deficient linear system: {0}")]
    RankDeficient(String),
    #[error("insufficient motion pairs: {retained} retained, need at least {required}")]
    InsufficientPairs { retained: usize, required: usize },
    #[error("insufficient line matches: {found} found, need at least {required}")]
    InsufficientMatches { found: usize, required: usize },
    #[error("geometry does not constrain the translation: {0}")]
    Geometry(String),
    #[error("zero-norm ground-truth translation")]
    ZeroGroundTruth,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported schema version {0:?}")]
    UnsupportedSchema(String),
    #[error("malformed document {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("missing point-cloud file {0}")]
    MissingCloud(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
