use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing value at row {row}, column `{column}`")]
    MissingCell { row: usize, column: String },

    #[error("non-numeric value `{value}` at row {row}, column `{column}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("measurement model is not identified: {0}")]
    Identification(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("matrix is singular: {context} (eigenvalue {eigenvalue:e} below floor {floor:e})")]
    Singular {
        context: String,
        eigenvalue: f64,
        floor: f64,
    },

    #[error("collinear design in {context}: columns {columns:?}")]
    Collinear {
        context: String,
        columns: Vec<String>,
    },

    #[error("improper measurement solution for variable `{0}`")]
    Improper(String),

    #[error("positivity violation: denominator density {density:e} for person {person} at time {time}")]
    Positivity {
        person: usize,
        time: usize,
        density: f64,
    },

    #[error("Ψ̂ repair clipped {fraction:.3} of the trace (limit {limit})")]
    UntrustworthyRepair { fraction: f64, limit: f64 },

    #[error("no convergence after {iterations} iterations: {context}")]
    NonConvergence { iterations: usize, context: String },

    #[error("G-estimation failed: {reason}")]
    GEstimation {
        reason: String,
        singular: bool,
        trace: Vec<crate::snmm::NewtonStep>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
