use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shape mismatch; `axis` names the offending axes.
    #[error("{op}: dimension mismatch on {axis}: {detail}")]
    Dim {
        op: &'static str,
        axis: String,
        detail: String,
    },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    /// Training diverged; names the first tensor found non-finite.
    #[error("non-finite values in {0}")]
    Diverged(String),
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("backward: loss does not depend on any trainable leaf")]
    Detached,
    #[error("format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            axis: axis.into(),
            detail: detail.into(),
        }
    }
}
