use thiserror::Error;

/// Errors raised by estimation, resampling and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing value at row {row}, column '{column}'")]
    MissingValue { row: usize, column: String },

    #[error("non-numeric value '{value}' at row {row}, column '{column}'")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("non-binary treatment value '{value}' at row {row}")]
    NonBinaryTreatment { row: usize, value: String },

    #[error("unknown column '{0}'")]
    UnknownColumn(String),

    #[error("no treated units")]
    NoTreatedUnits,

    #[error("no control units")]
    NoControlUnits,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("delta must lie strictly inside (0,1), got {0}")]
    DeltaOutOfRange(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "separation suspected after {iterations} iterations (|beta| = {beta_norm:.3e}, score norm = {score_norm:.3e})"
    )]
    Separation {
        iterations: usize,
        beta: Vec<f64>,
        beta_norm: f64,
        score_norm: f64,
    },

    #[error("degenerate mixing: {0}")]
    DegenerateMixing(String),

    #[error("singular identification: denominator {0:.3e} is numerically zero")]
    SingularIdentification(f64),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    SolverFailure {
        what: String,
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("singular bread matrix (condition number {condition:.3e})")]
    SingularBread { condition: f64 },

    #[error("unreliable bootstrap: {failed} of {total} replicates failed")]
    UnreliableBootstrap { failed: usize, total: usize },

    #[error("too many failed mixing replicates: {failed} of {total}")]
    ReplicateFailures { failed: usize, total: usize },

    #[error("balance infeasible: covariate '{covariate}' imbalance {imbalance:.3e}")]
    BalanceInfeasible { covariate: String, imbalance: f64 },
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::MissingValue { .. } => "missing_value",
            Error::NonNumeric { .. } => "non_numeric",
            Error::NonBinaryTreatment { .. } => "non_binary_treatment",
            Error::UnknownColumn(_) => "unknown_column",
            Error::NoTreatedUnits => "no_treated_units",
            Error::NoControlUnits => "no_control_units",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::DeltaOutOfRange(_) => "delta_out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Separation { .. } => "separation",
            Error::DegenerateMixing(_) => "degenerate_mixing",
            Error::SingularIdentification(_) => "singular_identification",
            Error::DegenerateWeights(_) => "degenerate_weights",
            Error::SolverFailure { .. } => "solver_failure",
            Error::SingularBread { .. } => "singular_bread",
            Error::UnreliableBootstrap { .. } => "unreliable_bootstrap",
            Error::ReplicateFailures { .. } => "replicate_failures",
            Error::BalanceInfeasible { .. } => "balance_infeasible",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::DeltaOutOfRange(delta))
    }
}
