use thiserror::Error;

use crate::data::GraphReport;

/// Which feasibility guard rejected a re-anchoring candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardKind {
    /// The consensus vector norm fell below `delta_mu`.
    Norm,
    /// The r-th singular value of the heterogeneity term fell below `delta_sigma`.
    Spectral,
}

impl std::fmt::Display for GuardKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GuardKind::Norm => write!(f, "norm guard"),
            GuardKind::Spectral => write!(f, "spectral guard"),
        }
    }
}

#[derive(Debug, Error)]
pub enum HjaError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("consensus direction is degenerate (column sums of S vanish)")]
    DegenerateConsensus,

    #[error("rank {requested} exceeds the maximum identifiable rank {max}")]
    RankTooLarge { requested: usize, max: usize },

    #[error("comparison graph disconnected{}: components {components:?}", judge.as_ref().map(|j| format!(" for judge {j}")).unwrap_or_default())]
    Connectivity {
        judge: Option<String>,
        components: Vec<Vec<usize>>,
    },

    #[error("re-anchoring failed: {0}")]
    Reanchor(GuardKind),

    #[error("solver stalled after {guard_failures} re-anchoring guard failures")]
    SolverStalled { guard_failures: usize },

    #[error("tangent chart is degenerate: {0}")]
    Chart(String),

    #[error("Fisher information is singular on the identified chart (min eigenvalue {min_eig:e}, max {max_eig:e})")]
    SingularInformation {
        min_eig: f64,
        max_eig: f64,
        graph: Option<Box<GraphReport>>,
    },

    #[error("target is not smooth at the estimate: {0}")]
    NonSmoothTarget(String),

    #[error("rank selection failed: {0}")]
    Selection(String),

    #[error("only {found} item pairs qualify for the near-tie protocol (need at least 3)")]
    InsufficientNearTiePairs { found: usize },

    #[error("no scorable test records")]
    EmptyTestSet,
}

impl HjaError {
    /// True for errors caused by bad input rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HjaError::Io(_)
                | HjaError::Format(_)
                | HjaError::Validation(_)
                | HjaError::DimensionMismatch(_)
                | HjaError::IndexOutOfRange(_)
                | HjaError::RankTooLarge { .. }
                | HjaError::Connectivity { .. }
                | HjaError::InsufficientNearTiePairs { .. }
                | HjaError::EmptyTestSet
        )
    }
}

pub type Result<T> = std::result::Result<T, HjaError>;
