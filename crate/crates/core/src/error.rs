use thiserror::Error;

/// Errors surfaced by density construction, flow evaluation, and estimators.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid covers only {covered:.6} of the probability mass ({missing:.3e} missing, need >= {required})")]
    GridCoverage {
        covered: f64,
        missing: f64,
        required: f64,
    },

    #[error("grids are incompatible: {0}")]
    GridMismatch(String),

    #[error("bin {bin} is degenerate: zero variance across {count} samples")]
    DegenerateBin { bin: usize, count: usize },

    #[error("non-finite value produced by block {block}")]
    NonFinite { block: usize },

    #[error("numerical Jacobian is singular at the requested point")]
    SingularJacobian,

    #[error("superlevel-volume table is not monotone at level {level:.6e}")]
    NonMonotoneProfile { level: f64 },

    #[error("pushforward lost {lost_fraction:.4}% of the mass; enlarge the grid")]
    MassLoss { lost_fraction: f64 },

    #[error("histogram underflow in bin {bin}: only {occupied} occupied cells")]
    HistogramUnderflow { bin: usize, occupied: usize },

    #[error("no valid slope exists for plateau {plateau}: density cannot be normalized")]
    NoValidSlope { plateau: f64 },

    #[error("rejection sampler exceeded {attempts} attempts; envelope is misconfigured")]
    RejectionFailure { attempts: usize },

    #[error("quadrature did not converge: {0}")]
    QuadratureFailure(String),

    #[error("operation requires dimension {required}, got {actual}")]
    UnsupportedDimension { required: usize, actual: usize },

    #[error("training aborted while fitting block {block}: {source}")]
    TrainAborted {
        block: usize,
        #[source]
        source: Box<CoreError>,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;
