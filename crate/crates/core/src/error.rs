use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("checkpoint error at line {line}: {message}")]
    Checkpoint { line: usize, message: String },

    #[error("grammar error at line {line}: {message}")]
    Grammar { line: usize, message: String },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
