use thiserror::Error;

/// Errors raised by the estimation and simulation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("adjacency row {0} has no links")]
    IsolatedUnit(usize),

    #[error("adjacency entry ({row}, {col}) = {value} is not 0 or 1")]
    NonBinaryAdjacency { row: usize, col: usize, value: f64 },

    #[error("weight matrix has non-zero diagonal entry {value} at row {row}")]
    NonZeroDiagonal { row: usize, value: f64 },

    #[error("lag specification references {0}")]
    BadLagSpec(String),

    #[error("factor vector is degenerate: tail sum phi_{period} = {phi:e}")]
    DegenerateFactor { period: usize, phi: f64 },

    #[error("{factors} factors requested with only {periods} periods")]
    TooManyFactors { factors: usize, periods: usize },

    #[error("only {available} independent instruments for {required} parameters")]
    RankDeficientInstruments { available: usize, required: usize },

    #[error("weight matrix is singular (smallest/largest eigenvalue {ratio:e})")]
    SingularWeightMatrix { ratio: f64 },

    #[error("projection is singular or ill-conditioned (condition number {condition:e})")]
    SingularProjection { condition: f64 },

    #[error("Jacobian is rank deficient (condition number {condition:e})")]
    RankDeficientJacobian { condition: f64 },

    #[error("restriction matrix is rank deficient")]
    RankDeficientRestriction,

    #[error("no starting value produced a finite criterion")]
    NoStartingValue,

    #[error("optimizer did not converge after {iterations} iterations (gradient {gradient:e})")]
    DidNotConverge { iterations: usize, gradient: f64 },

    #[error("linear system solve failed (residual {residual:e})")]
    SingularSystem { residual: f64 },

    #[error("normal equations are singular")]
    SingularNormalEquations,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Parse(err.to_string())
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
