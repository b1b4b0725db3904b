use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported dimension {dim}: at most {max} coordinates are supported here")]
    UnsupportedDimension { dim: usize, max: usize },

    #[error("degenerate reflection: diagonal entry R[{index}][{index}] is zero")]
    DegenerateReflection { index: usize },

    #[error("singular linear system (condition estimate {condition:.3e})")]
    SingularSystem { condition: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("internal consistency check failed for {what}: residual {residual:.3e}")]
    InternalConsistency { what: String, residual: f64 },

    #[error(
        "Skorokhod step failed after {iterations} iterations at state {state:?} with increment {increment:?}"
    )]
    StepFailure {
        state: Vec<f64>,
        increment: Vec<f64>,
        iterations: usize,
    },

    #[error("non-finite state detected at step {step}")]
    NonFinite { step: u64 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("value {value} outside the admissible range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("empty estimate: {0}")]
    EmptyEstimate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("incomplete input: {0}")]
    IncompleteInput(String),

    #[error("not enough tail data: need {needed} usable thresholds, found {found}; {hint}")]
    DataStarved {
        needed: usize,
        found: usize,
        hint: String,
    },

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(
        "optimization failed: best value {best_value} has terminal error {terminal_error:.3e}"
    )]
    OptimizationFailure {
        best_value: f64,
        terminal_error: f64,
        best_increments: Vec<f64>,
        best_tau: f64,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
