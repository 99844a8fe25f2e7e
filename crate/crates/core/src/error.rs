use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error)]
pub enum MdeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("assembly cap exceeded: N = {n} is above the cap {cap}")]
    CapExceeded { n: usize, cap: usize },

    #[error("eta = {eta:e} is below the solver floor {floor:e}")]
    EtaBelowFloor { eta: f64, floor: f64 },

    #[error("no convergence at z = {tau} + {eta}i after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        tau: f64,
        eta: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("initial guess outside the Newton basin: residual {residual:e} > {basin:e}")]
    OutsideBasin { residual: f64, basin: f64 },

    #[error("flatness violated: lower constant {c_est:e} (upper {c_upper:e})")]
    Flatness { c_est: f64, c_upper: f64 },

    #[error("fullness violated: lambda = {0:e}")]
    Fullness(f64),

    #[error("imaginary part of M is numerically singular (min eigenvalue {0:e}); use a larger eta")]
    SingularImaginaryPart(f64),

    #[error("point {0} lies inside the support")]
    InsideSupport(f64),

    #[error("empty support: density never exceeds the threshold")]
    EmptySupport,

    #[error("edge at {tau0} is not regular: {reason}")]
    NotRegular { tau0: f64, reason: String },

    #[error("{0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl MdeError {
    /// True when the error comes from a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MdeError::NotConverged { .. }
                | MdeError::SingularImaginaryPart(_)
                | MdeError::Numerical(_)
                | MdeError::OutsideBasin { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, MdeError>;
