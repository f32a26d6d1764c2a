use std::fmt;

/// Failure with the process exit code it maps to: 2 usage or config, 3 data,
/// 4 numerical.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, msg: msg.into() }
    }

    /// Classifies a library error raised while processing `context`.
    pub fn from_lib(context: &str, e: deepssm::Error) -> Self {
        use deepssm::Error as E;
        let (code, msg) = match &e {
            E::InvalidParameter { name, reason } => (EXIT_USAGE, format!("invalid --{}: {reason}", name.replace('_', "-"))),
            E::InfeasibleConfig(_) => (EXIT_USAGE, e.to_string()),
            E::Numerical(_) | E::DegenerateAffine(_) => (EXIT_NUMERICAL, e.to_string()),
            _ => (EXIT_DATA, e.to_string()),
        };
        Self { code, msg: format!("{context}: {msg}") }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches a context string to library results.
pub trait Context<T> {
    fn ctx(self, context: &str) -> CliResult<T>;
}

impl<T> Context<T> for deepssm::Result<T> {
    fn ctx(self, context: &str) -> CliResult<T> {
        self.map_err(|e| CliError::from_lib(context, e))
    }
}
