use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionMismatch(u32),
    #[error("truncated payload")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("attention rows not stochastic (layer {layer}, head {head}, row {row}, sum {sum})")]
    NotStochastic { layer: usize, head: usize, row: usize, sum: f64 },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("degenerate affinity")]
    DegenerateAffinity,
    #[error("degenerate reference frame")]
    DegenerateReference,
    #[error("empty reference bank")]
    EmptyBank,
    #[error("degenerate scene: {0} kept tokens")]
    DegenerateScene(usize),
    #[error("eigensolver failed to converge on eigenvalue {index} after {iterations} iterations")]
    NoConvergence { index: usize, iterations: usize },
    #[error("unusable reference demonstration")]
    UnusableReference,
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown fixture kind `{0}`")]
    UnknownFixture(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Errors caused by numerical breakdown rather than bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NoConvergence { .. } | Error::Diverged(_) | Error::DegenerateAffinity)
    }
}
