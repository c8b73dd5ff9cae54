use thiserror::Error;

/// Failure modes shared by the evaluation, homotopy and tracking layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite state at time index {k}")]
    NonFiniteState { k: usize },

    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("non-finite constraint value at row {row} ({family}, k={k})")]
    NonFiniteConstraint {
        row: usize,
        family: String,
        k: usize,
    },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid homotopy parameters: {0}")]
    InvalidParams(String),

    #[error("root bracketing failed for multiplier {index}: {reason}")]
    Bracketing { index: usize, reason: String },

    #[error("Jacobian is numerically rank deficient (sigma ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("corrector did not converge (residual {residual:.3e} after {iters} iterations)")]
    CorrectorFailed { residual: f64, iters: usize },

    #[error("infeasible initial guess: {0}")]
    InfeasibleGuess(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
