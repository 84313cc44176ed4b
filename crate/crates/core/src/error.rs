use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::chapter_metric::MetricError;
use crate::cohort_sim::SimError;
use crate::evaluation::EvalError;
use crate::ingest::IngestError;
use crate::sessionizer::SessionError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Ingest {
        path: PathBuf,
        #[source]
        source: IngestError,
    },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{}: {message}", path.display())]
    Malformed { path: PathBuf, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("grades are required: {0}")]
    MissingGrades(String),
    #[error("cohort mismatch for `{user}`: {detail}")]
    CohortMismatch { user: String, detail: String },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    /// 1 for input errors, 2 for configuration errors, 3 for invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Sim(_) => 2,
            Error::Session(SessionError::InvalidThreshold(_) | SessionError::InsufficientData) => 2,
            Error::Metric(
                MetricError::WeightMismatch { .. } | MetricError::InvalidWeight(_) | MetricError::EmptySubset,
            ) => 2,
            Error::Ingest {
                source: IngestError::BadPattern(_) | IngestError::InvalidCalendar(_) | IngestError::InvalidFormat(_),
                ..
            } => 2,
            Error::Invariant(_) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Error {
        let path = path.into();
        move |source| Error::Csv { path, source }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>) -> impl FnOnce(IngestError) -> Error {
        let path = path.into();
        move |source| Error::Ingest { path, source }
    }
}
