use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpinError {
    #[error("site {site} out of range for {n_spins} spins")]
    SiteOutOfRange { site: usize, n_spins: usize },

    #[error("sites must be distinct (got {0} twice)")]
    SameSite(usize),

    #[error("spin count {0} is outside the supported range 1..={max}", max = crate::spin::MAX_SPINS)]
    SpinCount(usize),

    #[error("partial trace needs at least one kept site")]
    EmptyKeepSet,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid spin system: {0}")]
    InvalidSystem(String),

    #[error("invalid orientation: {0}")]
    InvalidOrientation(String),

    #[error("nuclei {0} and {1} coincide")]
    CoincidentNuclei(usize, usize),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("no relaxation mechanism selected")]
    NoMechanism,

    #[error("orientation quadrature too coarse: relative change {change:.3e} on refinement exceeds {tol:.1e}")]
    QuadratureTooCoarse { change: f64, tol: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time grids differ")]
    GridMismatch,

    #[error("series of length {len} does not cover horizon {horizon} s (ends at {end} s)")]
    ShortSeries { len: usize, end: f64, horizon: f64 },

    #[error("not a density matrix: {0}")]
    NotADensity(String),

    #[error("combined spin count {requested} exceeds the direct-evolution cap {cap}")]
    OracleCap { requested: usize, cap: usize },

    #[error("correlation tensor has imaginary part {0:.3e} above tolerance")]
    ComplexCorrelation(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("refusing to serialize non-finite value in column {column} at row {row}")]
    NonFinite { column: String, row: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpinError>;

impl From<ndarray_linalg::error::LinalgError> for SpinError {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        SpinError::Numerical(e.to_string())
    }
}
