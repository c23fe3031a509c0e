use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] branchnet::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Core(e.into())
    }
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(e) => e.kind(),
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

/// A configuration error located at `field`.
pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Core(branchnet::Error::Config {
        field: field.into(),
        detail: detail.into(),
    })
}
