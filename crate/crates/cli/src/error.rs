use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("gradient check failed: max relative error {error:e} is not below {tolerance:e}")]
    GradCheck { error: f64, tolerance: f64 },
    #[error(transparent)]
    Core(#[from] dckd_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::GradCheck { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::CliError::Config(format!($($arg)*))
    };
}
pub(crate) use config_err;
