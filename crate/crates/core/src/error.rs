use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants are coarse categories so that front ends can map them onto
/// stable exit codes; the message carries the specifics.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// Malformed input shapes, unknown columns, non-binary treatment, and similar.
    #[error("structural error: {0}")]
    Structural(String),
    /// Data that parse fine but cannot support the requested estimate.
    #[error("estimation error: {0}")]
    Estimation(String),
    /// The identified set is empty under the declared restriction.
    #[error("identification error: {message}")]
    Identification {
        message: String,
        /// Smallest defier budget that would make the identified set nonempty.
        suggested_dbar: Option<f64>,
    },
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported case: {0}")]
    Unsupported(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Structural(_) => "structural",
            Error::Estimation(_) => "estimation",
            Error::Identification { .. } => "identification",
            Error::Solver(_) => "solver",
            Error::Domain(_) => "domain",
            Error::Unsupported(_) => "unsupported",
            Error::Precondition(_) => "precondition",
            Error::Degenerate(_) => "degenerate",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
