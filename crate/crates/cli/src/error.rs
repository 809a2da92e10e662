use adaptkit_core::data::DataError;
use adaptkit_core::eval::EvalError;
use adaptkit_core::model::ModelError;
use adaptkit_core::peft::PeftError;
use adaptkit_core::tokenizer::TokenizerError;
use adaptkit_core::train::TrainError;
use thiserror::Error;

/// Failure of a command, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input detected before or instead of doing work. Exit code 2.
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
    /// Work started and failed. Exit code 1.
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// Prefixes the field path, e.g. `sweep.values[1]` + `strategy.reduction`.
    pub fn within(self, prefix: &str) -> Self {
        match self {
            CliError::Validation { path, message } => CliError::Validation {
                path: format!("{prefix}: {path}"),
                message,
            },
            other => other,
        }
    }
}

pub fn validation(path: impl Into<String>, message: impl std::fmt::Display) -> CliError {
    CliError::Validation {
        path: path.into(),
        message: message.to_string(),
    }
}

pub fn runtime(message: impl std::fmt::Display) -> CliError {
    CliError::Runtime(message.to_string())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        runtime(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        runtime(e)
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        runtime(e)
    }
}

/// Architecture and strategy mismatches are caller errors; the rest is
/// runtime.
impl From<PeftError> for CliError {
    fn from(e: PeftError) -> Self {
        match e {
            PeftError::Invalid { field, message } => validation(format!("strategy.{field}"), message),
            PeftError::SpecMismatch(field) => validation("model", format!("model specs differ in `{field}`")),
            PeftError::StrategyMismatch(m) => validation("strategy", m),
            other => runtime(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Invalid { field, message } => validation(format!("train.{field}"), message),
            TrainError::Peft(p) => p.into(),
            other => runtime(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Peft(p) => p.into(),
            EvalError::Train(t) => t.into(),
            other => runtime(other),
        }
    }
}
