use alloc::string::String;

/// Errors raised by model construction, evaluation and the NPG drivers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("transition row P(.|s={state}, a={action}) sums to {sum}, expected 1")]
    TransitionRowSum { state: usize, action: usize, sum: f64 },

    #[error("transition entry P(s'={next}|s={state}, a={action}) = {value} is negative or non-finite")]
    TransitionEntry {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },

    #[error("cost c(s={state}, a={action}) = {value} lies outside [0, 1]")]
    CostRange { state: usize, action: usize, value: f64 },

    #[error("discount factor {0} lies outside [0, 1)")]
    Discount(f64),

    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{what} is not a probability vector (index {index}, value {value}, sum {sum})")]
    NotSimplex {
        what: &'static str,
        index: usize,
        value: f64,
        sum: f64,
    },

    #[error("{0} must be at least 1")]
    EmptySpace(&'static str),

    #[error("non-finite logit at state {state}, action {action}")]
    NonFiniteLogit { state: usize, action: usize },

    #[error("KL divergence is infinite: p[{index}] > 0 while q[{index}] = 0")]
    InfiniteDivergence { index: usize },

    #[error("linear solve failed: {0}")]
    Singular(&'static str),

    #[error("pseudoinverse residual {residual:e} exceeds tolerance {tolerance:e}")]
    PseudoinverseTolerance { residual: f64, tolerance: f64 },

    #[error("rollout exceeded the safety cap of {cap} steps")]
    HorizonCap { cap: u64 },

    #[error("SGD iterate became non-finite at step {step}; step size {step_size} is too large for the feature scale")]
    SgdDiverged { step: usize, step_size: f64 },

    #[error("invalid SGD configuration: {0}")]
    SgdConfig(&'static str),

    #[error("parameter became non-finite at iteration {iteration}")]
    NonFiniteParameter { iteration: usize },

    #[error("bound {bound} needs {assumption}")]
    MissingCoefficient {
        bound: &'static str,
        assumption: &'static str,
    },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = core::result::Result<T, Error>;
