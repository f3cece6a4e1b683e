use thiserror::Error;

/// Errors raised anywhere in the sampler stack.
#[derive(Debug, Error)]
pub enum HvpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in `{name}`: {detail}")]
    Numeric { name: String, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tolerance not met: {0}")]
    Tolerance(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HvpError {
    pub fn numeric(name: impl Into<String>, detail: impl Into<String>) -> Self {
        HvpError::Numeric {
            name: name.into(),
            detail: detail.into(),
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            HvpError::Config(_) | HvpError::Parameter(_) => 2,
            _ => 1,
        }
    }
}

impl From<csv::Error> for HvpError {
    fn from(e: csv::Error) -> Self {
        HvpError::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HvpError>;
