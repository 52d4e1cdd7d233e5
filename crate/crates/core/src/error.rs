use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value fell outside the range an approximation was built for.
    #[error("domain violation at site `{site}`: {value} not in [{lo}, {hi}]")]
    Domain {
        site: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported conversion: {0}")]
    Unsupported(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn domain(site: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Error::Domain {
            site: site.into(),
            value,
            lo,
            hi,
        }
    }

    /// Rewrites the site of a domain error, leaving other variants untouched.
    pub fn at_site(self, site: &str) -> Self {
        match self {
            Error::Domain { value, lo, hi, .. } => Error::Domain {
                site: site.to_string(),
                value,
                lo,
                hi,
            },
            other => other,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
