use thiserror::Error;

pub type Result<T> = std::result::Result<T, MllpError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MllpError {
    #[error("invalid variable specification: {0}")]
    InvalidSpec(String),

    #[error("invalid margin: {0}")]
    InvalidMargin(String),

    #[error("cell configuration does not assign variable {var}")]
    MissingAssignment { var: usize },

    #[error("category {level} out of range for variable {var} with {levels} levels")]
    LevelOutOfRange {
        var: usize,
        level: usize,
        levels: usize,
    },

    #[error("cell {index} has non-positive or non-finite probability {value}")]
    NonPositiveCell { index: usize, value: f64 },

    #[error("probabilities sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },

    #[error("{target} is not a subset of {source_set}")]
    NotSubset { target: String, source_set: String },

    #[error("invalid term: {0}")]
    InvalidTerm(String),

    #[error("invalid term selection: {0}")]
    InvalidSelection(String),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error(
        "{context}: no convergence after {iterations} iterations (last step/residual {residual:e})"
    )]
    NonConvergence {
        context: String,
        iterations: usize,
        residual: f64,
    },

    #[error("mean-parameter targets appear infeasible (residual stalled at {residual:e})")]
    Infeasible { residual: f64 },

    #[error("eigenvalue iteration failed to converge")]
    EigenFailure,

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("invalid replacement plan: {0}")]
    InvalidPlan(String),

    #[error("no admissible replacement: {0}")]
    NoAdmissibleReplacement(String),

    #[error("invalid statement: {0}")]
    InvalidStatement(String),

    #[error("model error at {location}: {message}")]
    Model { location: String, message: String },

    #[error(
        "margin {margin}: the model is not identifiable (Q vanishes on the independence stratum)"
    )]
    NonIdentifiable { margin: String },
}
