use thiserror::Error;

/// Errors raised while loading or validating a system model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model document is not valid: {0}")]
    Schema(String),
    #[error("subsystem {subsystem}: field `{field}` has a dimension mismatch: {detail}")]
    Dimension {
        subsystem: usize,
        field: &'static str,
        detail: String,
    },
    #[error("subsystem {subsystem}: field `{field}` is singular")]
    Singular { subsystem: usize, field: &'static str },
    #[error("subsystem {subsystem}: field `{field}` is rank deficient (rank {rank}, need {needed})")]
    RankDeficient {
        subsystem: usize,
        field: &'static str,
        rank: usize,
        needed: usize,
    },
    #[error("subsystem {subsystem}: field `{field}` must be strictly positive")]
    NotPositive { subsystem: usize, field: &'static str },
    #[error("coupling ({i}, {j}): {detail}")]
    Coupling { i: usize, j: usize, detail: String },
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("cannot read model file")]
    Io(#[from] std::io::Error),
}

/// Errors from the polytope kernel.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("set is unbounded")]
    Unbounded,
    #[error("vertex enumeration supports dimension <= 3, got {0}")]
    UnsupportedDimension(usize),
    #[error("linear program broke down numerically: {0}")]
    NumericalBreakdown(String),
    #[error("linear program is infeasible")]
    Infeasible,
}

/// Errors from LMI assembly, solving and solution recovery.
#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("disturbance channel present in subsystem {0} but no disturbance set given")]
    MissingDisturbanceSet(usize),
    #[error("decision vector has length {got}, expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("block {label} is not symmetric at ({row}, {col})")]
    Asymmetric { label: String, row: usize, col: usize },
    #[error("W block of subsystem {subsystem} is numerically singular (condition number {cond:e})")]
    SingularTransform { subsystem: usize, cond: f64 },
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("solution does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Errors from the local synthesis and simulation layers.
#[derive(Debug, Error)]
pub enum ControlError {
    #[error("point is outside the invariant set of subsystem {subsystem} (residual {residual:e})")]
    OutsideSet { subsystem: usize, residual: f64 },
    #[error("subsystem index {0} out of range")]
    BadSubsystem(usize),
    #[error("reach ladder towards goal {0} did not converge")]
    NotConverged(usize),
    #[error("certificate is not valid")]
    InvalidCertificate,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}
