use std::path::PathBuf;

use thiserror::Error;

use crate::volume::{Dims, VolumeKind};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // NIfTI decoding. Offsets are byte offsets into the (decompressed) file.
    #[error("malformed NIfTI header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("unsupported NIfTI datatype code {code} at byte {offset}")]
    UnsupportedDatatype { code: i16, offset: usize },
    #[error("expected 3 spatial dimensions, header declares {found} (byte {offset})")]
    DimensionCount { found: i16, offset: usize },
    #[error("truncated payload: need {expected} bytes from byte {offset}, found {found}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },

    // Raw format
    #[error("raw payload size mismatch: sidecar implies {expected} bytes, payload has {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("malformed sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },

    // Metadata CSV
    #[error("metadata line {line}: {reason}")]
    Metadata { line: u64, reason: String },
    #[error("duplicate instance id {0} in metadata")]
    DuplicateId(u32),
    #[error("confidence {value} for instance {id} outside [0, 1]")]
    ConfidenceRange { id: u32, value: f64 },
    #[error("unknown class token {0:?}")]
    UnknownClass(String),
    #[error("label map and metadata disagree: {0}")]
    MetadataMismatch(String),

    // Volume contracts
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("expected a {expected} volume, got {found}")]
    KindMismatch {
        expected: VolumeKind,
        found: VolumeKind,
    },
    #[error("dimension mismatch: {0} vs {1}")]
    DimsMismatch(Dims, Dims),

    // Evaluation
    #[error("no confidence for proposal {0}")]
    MissingConfidence(u32),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("ground truth contains no instances")]
    NoGroundTruth,
    #[error("no matched proposals; the exclude-FP summary is empty")]
    EmptySummary,
    #[error("proposal {0} is classified as UN; predictions must be BK, ND, DP or SG")]
    UnclassifiedPrediction(u32),
    #[error("no class code for {what} {id}")]
    MissingClass { what: &'static str, id: u32 },

    // Pipeline
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("volume has no foreground voxels")]
    EmptyForeground,
    #[error("patch at origin {origin:?} with size {size:?} exceeds volume {dims}")]
    PatchOutOfBounds {
        origin: [usize; 3],
        size: [usize; 3],
        dims: Dims,
    },

    // Fusion kernel
    #[error("point {index} at {coord:?} lies outside the window [0, {extent})")]
    PointOutsideWindow {
        index: usize,
        coord: [f64; 3],
        extent: f64,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called before forward")]
    MissingCache,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error was caused by the caller's input rather than by the
    /// environment (unreadable files are reported as input faults too, since
    /// a missing file is a malformed submission).
    pub fn is_input_fault(&self) -> bool {
        !matches!(self, Error::MissingCache)
    }
}
