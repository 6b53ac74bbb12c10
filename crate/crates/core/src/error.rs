use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("Jacobi eigenvalue iteration did not converge for matrix {matrix}")]
    EigenNotConverged { matrix: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing key `{0}` in model file")]
    MissingKey(String),

    #[error(
        "singular mean-path system at horizon {horizon}: |det| = {det:e} below threshold {threshold:e}"
    )]
    SingularSystem {
        horizon: f64,
        det: f64,
        threshold: f64,
    },

    #[error("Riccati solution blew up at t = {time}")]
    RiccatiBlowup { time: f64 },

    #[error("empty particle ensemble")]
    EmptyEnsemble,

    #[error("ensembles have unequal particle counts ({left} vs {right})")]
    UnequalCounts { left: usize, right: usize },

    #[error("first-order condition solve failed after {iterations} Newton iterations (residual {residual:e})")]
    NewtonFailed { iterations: usize, residual: f64 },

    #[error("rank-deficient regression design at {0}")]
    RankDeficient(String),

    #[error(
        "Picard iteration is not contracting on [{t_start}, {t_end}] after {iterations} iterations (last ratio {last_ratio})"
    )]
    NonContraction {
        t_start: f64,
        t_end: f64,
        iterations: usize,
        last_ratio: f64,
        distances: Vec<f64>,
    },

    #[error(
        "Picard iteration on [{t_start}, {t_end}] did not reach tolerance within {iterations} iterations (last distance {last_distance:e})"
    )]
    NotConverged {
        t_start: f64,
        t_end: f64,
        iterations: usize,
        last_distance: f64,
        distances: Vec<f64>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("at least {minimum} paths are required, got {requested}")]
    InsufficientPaths { requested: usize, minimum: usize },

    #[error("operation requires dimension {expected}, model has dimension {found}")]
    UnsupportedDimension { expected: usize, found: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Diagnostic outcomes describe ill-posedness of the problem rather than
    /// bad input.
    pub fn is_diagnostic(&self) -> bool {
        matches!(
            self,
            Error::NonContraction { .. }
                | Error::NotConverged { .. }
                | Error::SingularSystem { .. }
                | Error::RiccatiBlowup { .. }
        )
    }
}
