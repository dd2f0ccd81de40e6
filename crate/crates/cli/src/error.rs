use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Run(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 configuration, 2 run failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Run(_) => 2,
            CliError::Io { .. } => 3,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<incdet::Error> for CliError {
    fn from(e: incdet::Error) -> Self {
        use incdet::Error as E;
        match e {
            E::Io(err) => CliError::Io {
                context: "i/o".into(),
                source: err,
            },
            E::Config(_) | E::Parse { .. } | E::Integrity(_) | E::Json(_) => CliError::Config(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
