//! Crate-wide error type.

use std::fmt;

/// Errors produced anywhere in the pose-forecasting pipeline.
#[derive(Debug)]
pub enum Error {
    /// Joint mapping source array is too short for a referenced index.
    MappingSourceTooShort { needed: usize, got: usize },
    /// A joint index outside 0..25.
    JointIndexOutOfRange(usize),
    /// Tensor shapes do not conform to an op's rule.
    ShapeMismatch { op: &'static str, detail: String },
    /// Backward pass was asked to differentiate a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// A continuous heatmap value fell outside [0, 1].
    ValueOutOfRange { value: f64 },
    /// Gaussian target center lies outside the grid.
    CenterOutOfBounds { center: [i64; 3] },
    /// Sampling was asked to draw from a heatmap with no positive voxel.
    EmptyHeatmap,
    /// Suppression removed every voxel, leaving nothing to sample.
    NoSurvivors,
    /// Wrong heatmap form (logits vs. continuous) for an operation.
    FormMismatch { expected: &'static str },
    /// Number of prior joints does not match the model configuration.
    PriorCountMismatch { expected: usize, got: usize },
    /// A requested optional head is not present in the parameters.
    MissingHead(&'static str),
    /// A sampler stage's parameters were not provided.
    MissingStage(&'static str),
    /// Invalid model or training configuration.
    InvalidConfig(String),
    /// Training was started on an empty dataset.
    EmptyDataset,
    /// A target joint lies outside the prediction grid.
    TargetOutOfGrid { record: String, joint: usize },
    /// Dataset line failed to parse.
    Parse { line: usize, msg: String },
    /// Duplicate record id within one dataset file.
    DuplicateId { line: usize, id: String },
    /// Record with a pose that does not have exactly 25 joints.
    BadJointCount { record: String, got: usize },
    /// Non-finite coordinate in a pose.
    NonFinitePose { record: String },
    /// An actor is not assigned to any split.
    UnassignedActor(String),
    /// Refinement objective is non-finite at the starting pose.
    NonFiniteObjective,
    /// Metric over an empty list.
    EmptyList(&'static str),
    /// Binary checkpoint / heatmap file is malformed.
    Format(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::MappingSourceTooShort { needed, got } => write!(
                f,
                "joint mapping needs source index {needed} but source has only {got} entries"
            ),
            Error::JointIndexOutOfRange(i) => write!(f, "joint index {i} out of range 0..25"),
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::ValueOutOfRange { value } => {
                write!(f, "continuous heatmap value {value} outside [0, 1]")
            }
            Error::CenterOutOfBounds { center } => {
                write!(f, "gaussian target center {center:?} outside the 16³ grid")
            }
            Error::EmptyHeatmap => write!(f, "heatmap has no positive voxel to sample from"),
            Error::NoSurvivors => write!(f, "non-maximum suppression left no voxel to sample"),
            Error::FormMismatch { expected } => write!(f, "heatmap form mismatch: expected {expected}"),
            Error::PriorCountMismatch { expected, got } => {
                write!(f, "expected {expected} prior joints, got {got}")
            }
            Error::MissingHead(h) => write!(f, "model has no {h} head"),
            Error::MissingStage(s) => write!(f, "missing parameters for the {s} stage"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::EmptyDataset => write!(f, "training requires a non-empty dataset"),
            Error::TargetOutOfGrid { record, joint } => {
                write!(f, "record {record}: target joint {joint} lies outside the grid")
            }
            Error::Parse { line, msg } => write!(f, "line {line}: {msg}"),
            Error::DuplicateId { line, id } => write!(f, "line {line}: duplicate record id {id:?}"),
            Error::BadJointCount { record, got } => {
                write!(f, "record {record}: pose has {got} joints, expected 25")
            }
            Error::NonFinitePose { record } => {
                write!(f, "record {record}: pose has non-finite coordinates")
            }
            Error::UnassignedActor(a) => {
                write!(f, "actor {a:?} is not assigned to any split")
            }
            Error::NonFiniteObjective => write!(f, "refinement objective non-finite at start pose"),
            Error::EmptyList(what) => write!(f, "{what} requires a non-empty list"),
            Error::Format(msg) => write!(f, "malformed file: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
