use thiserror::Error;

/// Errors raised by the estimation pipeline.
///
/// Every variant maps to exactly one module-qualified code (see [`Error::code`]),
/// which the command line surfaces verbatim.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("high-order kernel order must be an even integer >= 4, got {0}")]
    InvalidKernelOrder(usize),
    #[error("unknown kernel `{0}` (expected epanechnikov, gaussian, gaussian4 or gaussian6)")]
    UnknownKernel(String),
    #[error("kernel moment check failed: {0}")]
    KernelMomentCheck(String),

    #[error("only {found} observations carry kernel weight at z0={z0}, need at least {needed}; increase h")]
    NotEnoughLocalData { z0: f64, found: usize, needed: usize },
    #[error("local design matrix at z0={z0} is singular (condition number {cond:.3e}); increase h")]
    SingularDesign { z0: f64, cond: f64 },
    #[error("density estimate must be positive, got {0}")]
    InvalidDensity(f64),

    #[error("fold is empty")]
    EmptyFold,
    #[error("regression design is rank deficient")]
    RankDeficientDesign,
    #[error("fold has {found} observations, need at least {needed}")]
    FoldTooSmall { found: usize, needed: usize },
    #[error("nuisance error rate alpha must be >= 0, got {0}")]
    InvalidRate(f64),
    #[error("evaluation fold overlaps a fold used to train nuisances or marginals")]
    FoldOverlap,

    #[error("pseudo-outcome is not finite at observation {0}")]
    NonFiniteResult(usize),

    #[error("quadrature at z0={z0} did not settle (relative change {change:.3e})")]
    QuadratureUnderResolved { z0: f64, change: f64 },

    #[error("ratio denominator is zero")]
    ZeroDenominator,
    #[error("influence arrays are not aligned ({0} vs {1} observations)")]
    MisalignedFolds(usize, usize),
    #[error("instrument too weak: complier proportion {0} at or below the relevance floor")]
    WeakInstrument(f64),
    #[error("treatment derivative {theta_a} at z0={z0} is at or below the relevance floor")]
    WeakInstrumentRegion { z0: f64, theta_a: f64 },

    #[error("risk grid step {step} exceeds h_min/4 = {limit}")]
    GridTooCoarse { step: f64, limit: f64 },
    #[error("every bandwidth candidate failed")]
    AllCandidatesFailed,

    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("treatment at row {row} is {value}, expected 0 or 1")]
    NonBinaryTreatment { row: usize, value: f64 },
    #[error("non-numeric cell at row {row}, column `{column}`: `{value}`")]
    NonNumericCell { row: usize, column: String, value: String },
    #[error("input file has no data rows")]
    EmptyFile,

    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable module-qualified error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidBandwidth(_) => "kernels.invalid_bandwidth",
            Error::InvalidKernelOrder(_) => "kernels.invalid_kernel_order",
            Error::UnknownKernel(_) => "kernels.unknown_kernel",
            Error::KernelMomentCheck(_) => "kernels.moment_check",
            Error::NotEnoughLocalData { .. } => "localpoly.not_enough_local_data",
            Error::SingularDesign { .. } => "localpoly.singular_design",
            Error::InvalidDensity(_) => "localpoly.invalid_density",
            Error::EmptyFold => "nuisance.empty_fold",
            Error::RankDeficientDesign => "nuisance.rank_deficient_design",
            Error::FoldTooSmall { .. } => "nuisance.fold_too_small",
            Error::InvalidRate(_) => "nuisance.invalid_rate",
            Error::FoldOverlap => "pseudo.fold_overlap",
            Error::NonFiniteResult(_) => "pseudo.non_finite_result",
            Error::QuadratureUnderResolved { .. } => "smooth.quadrature_under_resolved",
            Error::ZeroDenominator => "effects.zero_denominator",
            Error::MisalignedFolds(..) => "effects.misaligned_folds",
            Error::WeakInstrument(_) => "effects.weak_instrument",
            Error::WeakInstrumentRegion { .. } => "effects.weak_instrument_region",
            Error::GridTooCoarse { .. } => "bandwidth.grid_too_coarse",
            Error::AllCandidatesFailed => "bandwidth.all_candidates_failed",
            Error::MissingColumn(_) => "cli.missing_column",
            Error::NonBinaryTreatment { .. } => "cli.non_binary_treatment",
            Error::NonNumericCell { .. } => "cli.non_numeric_cell",
            Error::EmptyFile => "cli.empty_file",
            Error::InvalidInput(_) => "cli.invalid_input",
            Error::Io(_) => "cli.io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
