use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("{op}: zero-norm vector")]
    ZeroVector { op: &'static str },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("table {id}: {msg}")]
    InvalidTable { id: String, msg: String },

    #[error("non-finite weight at ({row}, {col})")]
    NanWeight { row: usize, col: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("negative alignment score {0}")]
    NegativeScore(f64),

    #[error(
        "size {size} replicate {replicate}: no subset exceeded unseen proportion {floor} \
         after {tries} draws (best {best:.4})"
    )]
    SubsampleExhausted {
        size: usize,
        replicate: usize,
        floor: f64,
        tries: usize,
        best: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("epoch {epoch}, instance {id}: {source}")]
    Training {
        epoch: usize,
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }
}
