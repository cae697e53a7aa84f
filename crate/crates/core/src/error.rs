use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor does not belong to this tape")]
    ForeignTensor,
    #[error("signal too short: {len} samples, need at least {need}")]
    SignalTooShort { len: usize, need: usize },
    #[error("input too short: {frames} frames, need at least {need}")]
    InputTooShort { frames: usize, need: usize },
    #[error("not eligible: {k} unique topics, need more than {m}")]
    NotEligible { k: usize, m: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{source_name}: line {line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },
    #[error("unsupported audio: {0}")]
    Audio(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("missing modality: {0}")]
    MissingModality(&'static str),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn at_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) => Error::Io(io),
            other => Error::Audio(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
