use thiserror::Error;

/// CLI failures, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 0 ok, 1 output i/o, 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    /// Library errors raised while processing data: invalid input is the
    /// data's fault, everything else is numerical.
    pub fn from_data_stage(e: dualbounds::Error) -> Self {
        match e {
            dualbounds::Error::InvalidInput(m) => CliError::Data(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}
