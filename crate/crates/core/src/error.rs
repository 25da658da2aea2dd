use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: &'static str,
    },

    #[error("operator is not Hermitian (max deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("state invariant violated at t = {time_ns} ns: {detail}")]
    InvariantViolation { time_ns: f64, detail: String },

    #[error("emitter {index} has no Zeeman data")]
    MissingZeeman { index: usize },

    #[error("transition curves do not cross between {lo} T and {hi} T")]
    NoCrossing { lo: f64, hi: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("time grid is not uniform (step {index} deviates by {deviation:e} ns)")]
    NonUniformGrid { index: usize, deviation: f64 },

    #[error("fit did not converge after {iterations} iterations")]
    FitNonConvergence { iterations: usize },

    #[error("sweep failed at detuning {detuning_ghz} GHz: {source}")]
    Sweep {
        detuning_ghz: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 = input or configuration validation, 3 = fit non-convergence,
    /// 1 = any numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter { .. }
            | Error::DimensionMismatch { .. }
            | Error::MissingZeeman { .. }
            | Error::Parse { .. }
            | Error::Config { .. }
            | Error::NonUniformGrid { .. }
            | Error::Io { .. } => 2,
            Error::FitNonConvergence { .. } => 3,
            Error::Sweep { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(Error::invalid("x", "bad").exit_code(), 2);
        assert_eq!(Error::config("emitters[0].beta", "bad").exit_code(), 2);
        assert_eq!(Error::FitNonConvergence { iterations: 500 }.exit_code(), 3);
        assert_eq!(Error::NonFinite { context: "rk4".into() }.exit_code(), 1);
        let wrapped = |source| Error::Sweep {
            detuning_ghz: 1.0,
            source: Box::new(source),
        };
        assert_eq!(wrapped(Error::FitNonConvergence { iterations: 500 }).exit_code(), 3);
        assert_eq!(wrapped(Error::Degenerate("x".into())).exit_code(), 1);
    }
}
