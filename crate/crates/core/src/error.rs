use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),

    #[error("domain construction failed: {0}")]
    Construction(String),

    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dense solver capacity exceeded: n = {n} > cap = {cap}")]
    Capacity { n: usize, cap: usize },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("step size too large: {0}")]
    StepSize(String),

    #[error("frequency undefined: field is identically zero")]
    UndefinedFrequency,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("check hypothesis not met: {0}")]
    Hypothesis(String),

    #[error("invalid check input: {0}")]
    Input(String),

    #[error("I(t) = {value:e} fell below the underflow guard")]
    Underflow { value: f64 },

    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::AtStep { .. } => self,
            other => Error::AtStep {
                step,
                source: Box::new(other),
            },
        }
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
