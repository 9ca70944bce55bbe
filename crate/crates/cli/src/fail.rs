//! Exit-code classification of failures.

use std::fmt;

pub type Result<T, E = anyhow::Error> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExitCode {
    Ok = 0,
    Config = 2,
    Data = 3,
    Numerical = 4,
}

/// A failure raised by the command layer itself.
#[derive(Debug)]
pub struct Fail {
    pub code: ExitCode,
    pub message: String,
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Fail {}

pub fn config_err(message: impl Into<String>) -> anyhow::Error {
    Fail {
        code: ExitCode::Config,
        message: message.into(),
    }
    .into()
}

pub fn data_err(message: impl Into<String>) -> anyhow::Error {
    Fail {
        code: ExitCode::Data,
        message: message.into(),
    }
    .into()
}

pub fn numerical_err(message: impl Into<String>) -> anyhow::Error {
    Fail {
        code: ExitCode::Numerical,
        message: message.into(),
    }
    .into()
}

fn core_code(e: &sysid_core::Error) -> ExitCode {
    use sysid_core::Error as E;
    match e {
        E::Config(_) | E::Invalid(_) => ExitCode::Config,
        E::Numerical(_) | E::Degenerate(_) | E::Graph(_) => ExitCode::Numerical,
        E::Shape(_) | E::Data(_) | E::Corrupt(_) | E::Truncated { .. } | E::Io(_) | E::Json(_) => ExitCode::Data,
    }
}

/// Exit code for an error: the first classified cause in its chain, else a data error.
pub fn exit_code(err: &anyhow::Error) -> ExitCode {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Fail>() {
            return f.code;
        }
        if let Some(e) = cause.downcast_ref::<sysid_core::Error>() {
            return core_code(e);
        }
    }
    ExitCode::Data
}
