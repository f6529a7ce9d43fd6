use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy}: focal lengths must be positive and all values finite")]
    InvalidIntrinsics { fx: f64, fy: f64, cx: f64, cy: f64 },
    #[error("invalid ground plane config: {0}")]
    InvalidGroundConfig(String),
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("ray does not meet the ground plane (normal component {normal_component})")]
    RayParallelOrAbove { normal_component: f64 },
    #[error("contact displacement reaches the horizon (denominator {denominator})")]
    DisplacementSingularity { denominator: f64 },
    #[error("map dimensions must be at least 1x1, got {width}x{height}")]
    ZeroDimension { width: usize, height: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoseError {
    #[error("forward direction is behind the camera (z = {0})")]
    ForwardDirectionBehindCamera(f64),
    #[error("no observations to fit")]
    EmptyObservations,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("attention row {row} lost all mass after masking")]
    MaskAllZeroRow { row: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for FusionError {
    fn from(e: std::io::Error) -> Self {
        FusionError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KittiError {
    #[error("calibration text has no P2 line")]
    MissingP2Line,
    #[error("line {line}, field {column}: cannot parse {token:?} as a number")]
    MalformedFloat { line: usize, column: usize, token: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    WrongFieldCount { line: usize, expected: usize, found: usize },
    #[error("line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("could not place object {object} without overlap after {attempts} attempts")]
    PlacementFailure { object: usize, attempts: usize },
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}
