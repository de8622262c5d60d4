use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("{what} = {value} out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: String,
        range: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl core::fmt::Debug,
        found: impl core::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context,
            expected: alloc::format!("{expected:?}"),
            found: alloc::format!("{found:?}"),
        }
    }

    pub(crate) fn range(
        what: &'static str,
        value: impl core::fmt::Display,
        range: impl core::fmt::Display,
    ) -> Self {
        Error::OutOfRange {
            what,
            value: alloc::format!("{value}"),
            range: alloc::format!("{range}"),
        }
    }
}
