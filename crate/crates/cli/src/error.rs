use std::fmt;

/// Process exit codes.
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad input: config, data files, chain files, flag values.
    Validation(String),
    /// Everything else: IO, divergence, numerical failures.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<devchain::Error> for CliError {
    fn from(e: devchain::Error) -> Self {
        use devchain::Error as E;
        let msg = e.to_string();
        let is_validation = match &e {
            E::ChainAborted { source, .. } => is_validation(source),
            other => is_validation(other),
        };
        if is_validation {
            CliError::Validation(msg)
        } else {
            CliError::Runtime(msg)
        }
    }
}

fn is_validation(e: &devchain::Error) -> bool {
    use devchain::Error as E;
    matches!(
        e,
        E::DimensionMismatch { .. }
            | E::EmptyDataset
            | E::NonFinite(_)
            | E::InvalidArgument(_)
            | E::Validation(_)
            | E::InsufficientSamples { .. }
            | E::EstimatorNotIndependent { .. }
            | E::StageOutOfRange { .. }
            | E::Parse { .. }
            | E::ChainFile(_)
    )
}

pub type CliResult<T> = Result<T, CliError>;
