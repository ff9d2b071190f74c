use thiserror::Error;

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<dynaquant::Error> for CliError {
    fn from(e: dynaquant::Error) -> Self {
        use dynaquant::Error as E;
        match e {
            E::Param(_) => CliError::config("parameters", e.to_string()),
            E::Parse { line, .. } => CliError::config(format!("line {line}"), e.to_string()),
            E::Numeric(detail) => CliError::Numeric(detail),
            E::Training { .. } => CliError::Numeric(e.to_string()),
            E::Data(detail) => CliError::Data(detail),
            E::Io(_) | E::Integrity { .. } | E::Version { .. } | E::ConfigMismatch(_) => {
                CliError::Data(e.to_string())
            }
            E::Shape { .. } | E::Contract(_) | E::Json(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
