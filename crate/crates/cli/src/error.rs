use kd_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    /// An artifact produced by an earlier command is absent.
    #[error("missing {artifact}; run `tskd {command}` first")]
    Missing {
        artifact: String,
        command: &'static str,
    },
    #[error("invalid arguments: {0}")]
    Invalid(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 2 validation, 3 missing dependency, 4 numerical abort, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::Shape(_)
                | CoreError::Lora(_)
                | CoreError::Dataset(_) => 2,
                CoreError::Dependency(_) => 3,
                CoreError::Numerical(_) => 4,
                _ => 1,
            },
            CliError::Missing { .. } => 3,
            CliError::Invalid(_) => 2,
            CliError::Other(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
