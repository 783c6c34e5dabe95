use crowdped_core::Error as CoreError;

/// Exit status for bad usage, configuration or unreadable inputs.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for failures while running (divergence, write errors).
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Input {
        context: String,
        #[source]
        source: CoreError,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn input(context: impl Into<String>) -> impl FnOnce(CoreError) -> CliError {
        let context = context.into();
        move |source| CliError::Input { context, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input { .. } => EXIT_USAGE,
            CliError::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::SpecInfeasible(_)
                | CoreError::Parse { .. }
                | CoreError::Geometry { .. }
                | CoreError::Checkpoint(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
