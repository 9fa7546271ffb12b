use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate class partition: {harmful} harmful and {benign} benign rows")]
    DegenerateClasses { harmful: usize, benign: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("subspace rank {k} exceeds available rank {max}")]
    RankTooLarge { k: usize, max: usize },

    #[error("SVD did not converge")]
    SvdNonConvergence,

    #[error("CKA undefined for {n} samples (need at least 2)")]
    CkaUndefined { n: usize },

    #[error("invalid value in {context}: {detail}")]
    InvalidValue {
        context: &'static str,
        detail: String,
    },

    #[error("layer set mismatch: {0}")]
    LayerMismatch(String),

    #[error("backward called without a matching forward pass")]
    BackwardWithoutForward,

    #[error("non-finite loss at step {step}: task={task_loss}, penalty={penalty}")]
    NonFiniteLoss {
        step: usize,
        task_loss: f64,
        penalty: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing anchor checkpoint {0}; run `fwssr pretrain` first")]
    MissingAnchor(PathBuf),

    #[error("bad file format in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateClasses { .. } => "degenerate_classes",
            Error::Shape { .. } => "shape",
            Error::RankTooLarge { .. } => "rank_too_large",
            Error::SvdNonConvergence => "svd_non_convergence",
            Error::CkaUndefined { .. } => "cka_undefined",
            Error::InvalidValue { .. } => "invalid_value",
            Error::LayerMismatch(_) => "layer_mismatch",
            Error::BackwardWithoutForward => "backward_without_forward",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::MissingAnchor(_) => "missing_anchor",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn invalid(context: &'static str, detail: impl ToString) -> Self {
        Error::InvalidValue {
            context,
            detail: detail.to_string(),
        }
    }
}
