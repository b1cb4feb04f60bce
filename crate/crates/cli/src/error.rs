use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("gradient check failed")]
    GradCheckFailed,

    #[error(transparent)]
    Core(#[from] rtrv_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl CliError {
    /// 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        use rtrv_core::Error as E;
        match self {
            CliError::ConfigInvalid(_) => 2,
            CliError::Data(_) => 3,
            CliError::GradCheckFailed => 4,
            CliError::Core(e) => match e {
                E::Config(_) | E::SpecInvalid(_) | E::LevelOutOfRange(..) | E::BatchSize(_) => 2,
                E::NonFinite(_) => 4,
                _ => 3,
            },
        }
    }
}
