use thiserror::Error;

/// Errors produced by the solvers and their supporting types.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {what} (index {index}, limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("minimizer did not converge after {iterations} iterations (residual {residual:.3e})")]
    Minimizer { iterations: usize, residual: f64 },

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("picard iteration did not reach tolerance {tol:.3e} in {iterations} sweeps (last residual {last:.3e})")]
    NonConvergence {
        iterations: usize,
        tol: f64,
        last: f64,
        history: Vec<f64>,
    },

    #[error("continuation failed: step fell below {min_step:.3e}; attempted delta values {attempted:?}")]
    Continuation { min_step: f64, attempted: Vec<f64> },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
