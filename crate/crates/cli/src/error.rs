use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] wienerlab::Error),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use wienerlab::Error as E;
        match self {
            CliError::Config(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
            CliError::Core(e) => match e {
                E::NonFiniteDrift { .. } | E::RankDeficient { .. } | E::SinkhornNonConvergence { .. } | E::Divergence { .. } => {
                    EXIT_NUMERICAL
                }
                E::Io(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            },
        }
    }

    /// `validation-error`, `numerical-error` or `io-error`.
    pub fn status(&self) -> &'static str {
        match self.exit_code() {
            EXIT_VALIDATION => "validation-error",
            EXIT_NUMERICAL => "numerical-error",
            _ => "io-error",
        }
    }
}
