use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument or configuration value lies outside its valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("binning mismatch: {0}")]
    BinningMismatch(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn format_err(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        what,
        detail: detail.into(),
    }
}
