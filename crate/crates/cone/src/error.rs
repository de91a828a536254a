//! Error type shared by every module, with the CLI exit-code mapping.

use std::path::PathBuf;

/// Crate-wide error. Each variant carries a human-readable description of
/// what went wrong and, where useful, the offending values.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not match what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),
    /// An input value is outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A computation produced a non-finite or otherwise unusable value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Bad configuration: unknown key, unparsable value, inconsistent flags.
    #[error("config error: {0}")]
    Config(String),
    /// Bad data on disk: missing directories, malformed images or checkpoints.
    #[error("data error: {0}")]
    Data(String),
    /// An I/O operation failed; `path` names the file involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for data problems, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Shape(_) | Error::Domain(_) | Error::Numeric(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_contract() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Data("x".into()).exit_code(), 3);
        assert_eq!(Error::io("f", std::io::Error::other("x")).exit_code(), 3);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 4);
        assert_eq!(Error::Shape("x".into()).exit_code(), 4);
        assert_eq!(Error::Domain("x".into()).exit_code(), 4);
    }

    #[test]
    fn display_includes_detail() {
        let e = Error::Shape("expected [3, 4], got [4, 3]".into());
        assert!(e.to_string().contains("expected [3, 4]"));
    }
}
