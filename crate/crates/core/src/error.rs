use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Every variant has a stable kebab-case name (see [`Error::name`]) so the
/// command-line front end can surface failures in machine-readable reports.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix contains a non-finite entry")]
    NonFinite,
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("singular value decomposition failed to converge")]
    DecompositionFailed,
    #[error("singular value gap is not positive (rho = {rho:e})")]
    GapViolation { rho: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("problem has {params} parameters, above the dense limit of {limit}")]
    SizeLimit { params: usize, limit: usize },
    #[error("layer {layer} is not a layerwise minimum (normal-equation residual {residual:e})")]
    NotLayerwiseMinimum { layer: usize, residual: f64 },
    #[error("weights are not a numerical local minimum: {0}")]
    NotLocalMinimum(String),
    #[error("could not complete layer {layer} to full rank within the solution set of its normal equation")]
    RankCompletion { layer: usize },
    #[error("step parameter underflowed before the perturbation became admissible")]
    StepUnderflow,
    #[error("construction failed: {0}")]
    Construction(String),
    #[error("local-minimality certification failed: sampled decrease {decrease:e}")]
    CertificationFailed { decrease: f64 },
    #[error("gradient descent diverged at iteration {iteration} (loss {loss:e})")]
    Divergence { iteration: usize, loss: f64 },
    #[error("instance generation failed: {0}")]
    Generation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn name(&self) -> &'static str {
        match self {
            Error::NonFinite => "non-finite",
            Error::Dimension { .. } => "dimension",
            Error::DecompositionFailed => "decomposition-failed",
            Error::GapViolation { .. } => "gap-violation",
            Error::Precondition(_) => "precondition",
            Error::SizeLimit { .. } => "size-limit",
            Error::NotLayerwiseMinimum { .. } => "not-a-layerwise-minimum",
            Error::NotLocalMinimum(_) => "not-a-local-minimum",
            Error::RankCompletion { .. } => "rank-completion",
            Error::StepUnderflow => "step-underflow",
            Error::Construction(_) => "construction",
            Error::CertificationFailed { .. } => "certification-failed",
            Error::Divergence { .. } => "divergence",
            Error::Generation(_) => "generation",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    ) -> Self {
        Error::Dimension {
            context,
            expected: format!("{}x{}", expected.0, expected.1),
            found: format!("{}x{}", found.0, found.1),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
