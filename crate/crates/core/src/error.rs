use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // geometry
    #[error("point is behind the camera (z = {z:e})")]
    PointBehindCamera { z: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    // tensors
    #[error("invalid feature grid: {0}")]
    InvalidGrid(String),
    #[error("keypoint {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    KeypointOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },

    // retrieval
    #[error("PCA needs at least 2 samples, got {count}")]
    InsufficientSamples { count: usize },
    #[error("requested {requested} output dimensions but at most {max} are available")]
    DimensionTooLarge { requested: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("descriptor projects to the zero vector")]
    DegenerateDescriptor,
    #[error("descriptor database is empty")]
    EmptyDatabase,
    #[error("duplicate reference id {0:?}")]
    DuplicateId(String),

    // matching
    #[error("channel mismatch: dense grid has {dense}, descriptor has {sparse}")]
    ChannelMismatch { dense: usize, sparse: usize },
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("invalid ratio test configuration: {0}")]
    InvalidRatioConfig(String),

    // pose
    #[error("degenerate P3P configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("P3P system has no real solution")]
    NoRealSolution,
    #[error("RANSAC needs at least 4 correspondences, got {count}")]
    TooFewCorrespondences { count: usize },
    #[error("invalid RANSAC configuration: {0}")]
    InvalidRansacConfig(String),

    // pipeline
    #[error("no ground truth pose for query {0:?}")]
    MissingGroundTruth(String),

    // synth
    #[error("could not place cameras with the required visibility after {attempts} attempts")]
    UnsatisfiableVisibility { attempts: usize },
    #[error("invalid synthetic scene parameters: {0}")]
    InvalidSceneParams(String),

    // serialization
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("header dimensions overflow: {0}")]
    DimOverflow(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
