use thiserror::Error;

/// Errors surfaced by the embedding generator, the LM bridge, the data
/// pipeline and the evaluation harnesses.
#[derive(Error, Debug)]
pub enum CollegeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("token alignment failed ({reason}); positive={positive:?} original={original:?}")]
    Alignment {
        reason: String,
        positive: Vec<u32>,
        original: Vec<u32>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("pipeline error on document {doc_id}: {message}")]
    Pipeline { doc_id: String, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("judge error: {0}")]
    Judge(String),

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CollegeError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CollegeError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        CollegeError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CollegeError>;
