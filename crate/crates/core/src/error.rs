use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("trajectory has fewer than 2 positions")]
    EmptyTrajectory,

    #[error("non-increasing timestamps in track {track_id} at position {index}")]
    DegenerateTimestep { track_id: String, index: usize },

    #[error("segment of zero length at position {index}")]
    DegenerateSegment { index: usize },

    #[error("feature is flagged invalid")]
    InvalidFeature,

    #[error("need at least 3 correspondences, got {0}")]
    TooFewPairs(usize),

    #[error("correspondences are collinear (singular value ratio {ratio:.3e})")]
    DegenerateGeometry { ratio: f64 },

    #[error("matched trajectories have no overlapping samples")]
    InsufficientOverlap,

    #[error("no usable candidate matches ({raw} raw, {filtered} after filtering)")]
    NoCandidateMatches { raw: usize, filtered: usize },

    #[error("both sessions have zero score")]
    BothZeroScore,

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
