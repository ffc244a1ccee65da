use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric core and the modules built on it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// Operand shapes do not conform (matmul dims, row counts, ...).
    InvalidShape(String),
    /// An argument is outside its documented domain (dropout rate, tau, ...).
    InvalidArgument(String),
    /// Dataset construction left no usable users or interactions.
    EmptyDataset(String),
    /// Negative sampling could not find a candidate within the rejection budget.
    SamplerExhausted(String),
    /// A loss component evaluated to NaN or infinity; names the component.
    NonFinite(String),
    /// Evaluation was requested but no test entries exist.
    EmptyEval(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidShape(m) => write!(f, "invalid shape: {m}"),
            CoreError::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            CoreError::EmptyDataset(m) => write!(f, "empty dataset: {m}"),
            CoreError::SamplerExhausted(m) => write!(f, "sampler exhausted: {m}"),
            CoreError::NonFinite(m) => write!(f, "non-finite loss component: {m}"),
            CoreError::EmptyEval(m) => write!(f, "empty evaluation: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
