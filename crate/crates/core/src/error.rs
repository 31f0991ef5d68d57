use alloc::string::String;
use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("Upsilon not invertible")]
    UpsilonNotInvertible,
    #[error("input weight R + D'PD is not invertible")]
    InputWeightSingular,
    #[error("operator on stability boundary")]
    OperatorSingular,
    #[error("eigenvalue solver failed to converge")]
    EigenFailure,
    #[error("initial gain not admissible")]
    InitialGainNotAdmissible,
    #[error("iterate at outer {outer}, inner {inner} is not mean-square stabilizing")]
    LostStability { outer: usize, inner: usize },
    #[error("inner loop did not converge within {max} iterations (outer {outer})")]
    InnerNotConverged { outer: usize, max: usize },
    #[error("outer loop did not converge within {0} iterations")]
    OuterNotConverged(usize),
    #[error("solution failed its stability certificate")]
    NotCertified,
    #[error("no stabilizer found")]
    NoStabilizer,
    #[error("LMI solution not stabilizing")]
    LmiNotStabilizing,
    #[error("insufficient excitation: rank {rank} < {required}")]
    InsufficientExcitation { rank: usize, required: usize },
    #[error("data window out of range: {0}")]
    WindowOutOfRange(String),
    #[error("too few iterates to estimate a contraction rate ({0})")]
    TooFewSteps(usize),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
