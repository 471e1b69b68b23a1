use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands disagree on shape.
    Shape {
        op: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    /// A configuration or argument is outside its admissible range.
    InvalidArgument(String),
    /// A partition assignment overlaps, leaves gaps, or has empty clients.
    Partition(String),
    /// A value that must be finite was NaN or infinite.
    NonFinite(&'static str),
    /// Normalization statistics are degenerate.
    DegenerateStats { std: f64 },
    /// A round could not complete because a client did not report.
    MissingClient(usize),
    /// Malformed wire message.
    Decode(String),
    /// A client upload carried data that must stay on the client.
    PrivacyViolation(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, expected, found } => write!(
                f,
                "{op}: shape mismatch, expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Partition(msg) => write!(f, "invalid partition: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::DegenerateStats { std } => {
                write!(f, "normalization std {std:e} is below the 1e-8 floor")
            }
            Error::MissingClient(id) => write!(f, "client {id} did not report this round"),
            Error::Decode(msg) => write!(f, "decode error: {msg}"),
            Error::PrivacyViolation(msg) => write!(f, "privacy violation: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
