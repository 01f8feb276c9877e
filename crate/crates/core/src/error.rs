use thiserror::Error;

#[derive(Debug, Error)]
pub enum MantaError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value at coordinate {index} of {what}")]
    NonFinite { what: String, index: usize },

    #[error("non-finite loss at episode {episode} (replay seed {seed})")]
    Diverged { episode: usize, seed: u64 },

    #[error("{what}: bad format at byte {offset}: {reason}")]
    Format {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("{what}: truncated at byte {offset}, expected {expected} bytes but only {actual} available")]
    Truncated {
        what: &'static str,
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MantaError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(MantaError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(MantaError::Invalid(msg.into()))
}
