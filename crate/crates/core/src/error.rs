use crate::schema::LandmarkId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input syntax. `line`/`column` are 1-based; 0 when unknown.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("record {record} ({image_id}): missing landmark {landmark}")]
    MissingLandmark {
        record: usize,
        image_id: String,
        landmark: LandmarkId,
    },

    #[error("record {record} ({image_id}): unknown landmark name {name:?}")]
    UnknownLandmark {
        record: usize,
        image_id: String,
        name: String,
    },

    #[error("record {record} ({image_id}): {message}")]
    Validation {
        record: usize,
        image_id: String,
        message: String,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("line fit needs at least 2 points, got {0}")]
    Arity(usize),

    #[error("degenerate line direction (anisotropy {anisotropy:e}, trace {trace:e})")]
    Degenerate { anisotropy: f64, trace: f64 },

    #[error("unpaired image ids: missing from predictions {missing_in_pred:?}, missing from ground truth {missing_in_gt:?}")]
    Pairing {
        missing_in_pred: Vec<String>,
        missing_in_gt: Vec<String>,
    },

    #[error("heatmap container: {0}")]
    Container(String),

    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch:?})")]
    Divergence {
        epoch: usize,
        last_finite_epoch: Option<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
