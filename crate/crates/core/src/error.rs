use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("degenerate variance {value:e} at diagonal index {index}")]
    DegenerateVariance { index: usize, value: f64 },

    #[error("assumed posterior has non-positive trace {trace:e} at iteration {iteration}")]
    DegeneratePosterior { iteration: usize, trace: f64 },

    #[error("extended covariance is not invertible at iteration {iteration}")]
    SingularExtendedCovariance { iteration: usize },

    #[error("shallow-water solver blew up at step {step}")]
    BlowUp { step: usize },

    #[error("CFL condition violated: courant number {courant:.3e} >= 1")]
    Cfl { courant: f64 },

    #[error("trial {trial} failed: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cycle {cycle} failed: {source}")]
    Cycle {
        cycle: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than numerical failure.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidParameter(_) | Error::DimensionMismatch { .. } | Error::Parse(_) => true,
            Error::Trial { source, .. } | Error::Cycle { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
