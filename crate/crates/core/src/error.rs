use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in the pipeline.
///
/// Variants are grouped by the exit-code class the command line maps them to:
/// configuration problems, numerical failures and I/O failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input: bad dimensions, out-of-range
    /// parameters, index sets that do not fit the data.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration or model file could not be interpreted.
    #[error("config error: {0}")]
    Config(String),

    /// A numerical kernel failed: singular pivot, non-convergence, failed
    /// factorization, unstable integration.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    /// Error raised while executing a named pipeline stage.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the command line: 2 config, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::InvalidInput(_) | Error::Config(_) => 2,
            Error::Numerical(_) => 3,
            Error::Io { .. } | Error::Csv { .. } => 4,
            Error::Stage { .. } => unreachable!("root() strips stage wrappers"),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_root_cause() {
        let e = Error::numerical("boom").in_stage("fit").in_stage("outer");
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("fit"));
        assert_eq!(Error::config("x").exit_code(), 2);
        let io = Error::io("/nope", std::io::Error::other("denied"));
        assert_eq!(io.exit_code(), 4);
    }
}
