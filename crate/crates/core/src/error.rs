use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("model has no transverse decomposition (U, l)")]
    MissingTransverse,
    #[error("non-finite value while evaluating {0}")]
    NonFiniteValue(String),
    #[error("unknown model `{0}`")]
    NotFound(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("state left the domain box at t = {t}")]
    BlowUp { t: f64 },
    #[error("diffusion matrix is numerically singular at {0:?}")]
    SingularDiffusion(Vec<f64>),
    #[error("reverse integration converged to {found:?}, not to the attractor")]
    WrongBasin { found: Vec<f64> },
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("zero of the drift at {point:?} has {unstable} unstable directions, expected 1")]
    NotASaddle { point: Vec<f64>, unstable: usize },
    #[error("unstable eigenvalue of the saddle Jacobian is complex")]
    ComplexUnstableEigenvalue,
    #[error("degenerate quasipotential Hessian: {0}")]
    DegenerateHessian(String),
    #[error("Lyapunov equation is resonant (condition number {0:e})")]
    ResonantSpectrum(f64),
    #[error("Hessian signature mismatch: expected {expected}, found {negative} negative eigenvalues")]
    WrongSignature { expected: &'static str, negative: usize },
    #[error("boundary point {0:?} violates the exit conditions")]
    CharacteristicPoint(Vec<f64>),
    #[error("point {0:?} is not reachable by a fluctuation path from the attractor")]
    UnreachablePoint(Vec<f64>),
    #[error("no reachable boundary sample")]
    UnreachableBoundary,
    #[error("quasipotential presumed non-smooth along the instanton: {0}")]
    NonSmoothQuasipotential(String),
    #[error("every trajectory was censored at max_steps")]
    AllCensored,
    #[error("epsilon = {epsilon} is outside the metastable regime (mean time {mean_time:.3} < {threshold:.3})")]
    InsufficientRegime {
        epsilon: f64,
        mean_time: f64,
        threshold: f64,
    },
}

impl Error {
    /// True for failures of a modelling assumption (as opposed to purely
    /// numerical trouble or bad input).
    pub fn is_assumption_failure(&self) -> bool {
        matches!(
            self,
            Error::MissingTransverse
                | Error::WrongBasin { .. }
                | Error::NotASaddle { .. }
                | Error::ComplexUnstableEigenvalue
                | Error::DegenerateHessian(_)
                | Error::WrongSignature { .. }
                | Error::CharacteristicPoint(_)
                | Error::UnreachablePoint(_)
                | Error::UnreachableBoundary
                | Error::NonSmoothQuasipotential(_)
                | Error::InsufficientRegime { .. }
        )
    }

    pub fn is_usage(&self) -> bool {
        matches!(self, Error::NotFound(_) | Error::InvalidInput(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
