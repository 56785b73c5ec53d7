use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shift window exhausted: {0}")]
    Truncation(String),

    #[error("period {requested} exceeds the supported maximum {max}")]
    PeriodTooLarge { requested: u32, max: u32 },

    #[error("no admissible intersection found: {0}")]
    SearchFailure(String),

    #[error("step too large: h*|H| = {product:.3e} (limit {limit})")]
    StepTooLarge { product: f64, limit: f64 },

    #[error("numerical degeneracy: {0}")]
    Degeneracy(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("spectrum degeneracy: {0}")]
    SpectrumDegeneracy(String),

    #[error("isotopy failure: {0}")]
    IsotopyFailure(String),

    #[error("flowbox geometry: {0}")]
    Geometry(String),

    #[error("perturbation budget violated: measured {measured:.6e} >= allowed {allowed:.6e}")]
    Budget { measured: f64, allowed: f64 },

    #[error("atom count mismatch: {0} vs {1}")]
    AtomCount(usize, usize),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Stable machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) => "invalid_dimension",
            Error::Truncation(_) => "truncation",
            Error::PeriodTooLarge { .. } => "period_too_large",
            Error::SearchFailure(_) => "search_failure",
            Error::StepTooLarge { .. } => "step_too_large",
            Error::Degeneracy(_) => "degeneracy",
            Error::Precondition(_) => "precondition",
            Error::SpectrumDegeneracy(_) => "spectrum_degeneracy",
            Error::IsotopyFailure(_) => "isotopy_failure",
            Error::Geometry(_) => "geometry",
            Error::Budget { .. } => "budget",
            Error::AtomCount(..) => "atom_count",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}
