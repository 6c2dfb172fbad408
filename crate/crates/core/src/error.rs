use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    Construction { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("gradient oracle: {0}")]
    Oracle(String),

    #[error("modality alignment: {0}")]
    Alignment(String),

    #[error("adapter block {index} requested but only {blocks} blocks exist")]
    Sequencing { index: usize, blocks: usize },

    #[error("input {height}x{width} is smaller than the 32x32 pyramid minimum")]
    Size { height: usize, width: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("numeric failure at step {step}: {detail}")]
    Numeric { step: usize, detail: String },

    #[error("validation: {0}")]
    Validation(String),

    #[error("unknown template `{0}`")]
    Lookup(String),

    #[error("render {template}: {reason}")]
    Render { template: String, reason: String },

    #[error("backend `{backend}` failed on record `{record}`: {message}")]
    Backend {
        backend: String,
        record: String,
        message: String,
        retryable: bool,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors that come from bad numbers rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Numeric { .. } | Error::Oracle(_)
        )
    }
}
