//! Crate-wide error type.
//!
//! Variants are grouped by origin: input validation (parsing, bounds,
//! conflicting records), statistical preconditions (insufficient data,
//! non-positive-definite correlation), and numerical failures (singular
//! ridge systems, divergence). [`Error::is_numerical`] drives the CLI exit
//! code split between user errors and numerical errors.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file content.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Two records claim the same tensor cell at the same time.
    #[error("duplicate observation for cell {cell:?} at time {time}")]
    DuplicateObservation { cell: Vec<u32>, time: f64 },

    /// A numeric value fell outside its admissible interval.
    #[error("{what} out of bounds: {value} not in [{lo}, {hi}]")]
    Bounds {
        what: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// An index exceeded the declared dimension or group count.
    #[error("{what} {got} out of range (valid 1..={max})")]
    IndexRange {
        what: String,
        got: usize,
        max: usize,
    },

    /// Dimension or shape mismatch between two containers.
    #[error("shape mismatch: {msg}")]
    Shape { msg: String },

    /// Configuration value combination that cannot be honored.
    #[error("invalid configuration: {msg}")]
    Config { msg: String },

    /// Requested knots cannot be placed (too few distinct time points).
    #[error("degenerate knots: {msg}")]
    DegenerateKnots { msg: String },

    /// Correlation parameters give a non-positive-definite matrix.
    #[error("correlation matrix not positive definite: {msg}")]
    NotPositiveDefinite { msg: String },

    /// Too little data to estimate a nuisance parameter or fit a block.
    #[error("insufficient data: {msg}")]
    InsufficientData { msg: String },

    /// Prediction requested for a subject with no subgroup assignment.
    #[error("cold start unresolvable: {msg}")]
    ColdStartUnresolvable { msg: String },

    /// A ridge normal system was singular with zero penalty.
    #[error("singular normal system with zero ridge penalty in {block}; raise the penalty")]
    RidgeDegenerate { block: String },

    /// The objective became non-finite during optimization.
    #[error("divergence after accepting block {block}: objective {value}")]
    Divergence { block: String, value: f64 },

    /// An empty data split where observations were required.
    #[error("empty split: {msg}")]
    EmptySplit { msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {msg}")]
    Json { path: String, msg: String },
}

impl Error {
    /// True for numerical failures (as opposed to invalid input or config).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::RidgeDegenerate { .. }
                | Error::Divergence { .. }
        )
    }

    /// Wraps an I/O error with the path it concerns.
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
