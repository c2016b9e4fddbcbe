use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid basis dimensions: degree {degree}, count {count}")]
    InvalidBasis { degree: usize, count: usize },

    #[error("basis index {index} out of range for {count} functions")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("coordinate {value} on axis {axis} is outside [0, 1]")]
    OutOfUnitInterval { axis: usize, value: f64 },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },

    #[error("sample has zero spread; kernel bandwidth undefined")]
    ZeroVariance,

    #[error("probability {0} is outside (0, 1)")]
    InvalidProbability(f64),

    #[error("invalid SCAD parameters: alpha {alpha}, beta {beta}")]
    InvalidScad { alpha: f64, beta: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("copula density vanishes at sample point {index}")]
    ZeroDensity { index: usize },

    #[error("multiplier solver did not converge after {iterations} sweeps (last change {last_change:e}, marginal residual {residual:e})")]
    MultiplierNonConvergence {
        iterations: usize,
        last_change: f64,
        residual: f64,
    },

    #[error("negative M-step denominator {value:e} at cell {cell}")]
    NegativeDenominator { cell: usize, value: f64 },

    #[error("infeasible marginal targets after fixing degenerate slices")]
    InfeasibleTargets,

    #[error("sampler exhausted its attempt budget of {attempts} proposals")]
    SamplerBudget { attempts: u64 },

    #[error("{0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
