//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A sample filename does not follow the `<pid>_c<cam>s<seq>_<frame>_<k>.jpg` scheme.
    #[error("malformed sample filename: {0:?}")]
    MalformedName(String),

    /// A configuration value is out of its valid range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Fewer labeled classes are available than a PK batch requires.
    #[error("insufficient classes for PK sampling: need {needed}, have {available}")]
    InsufficientClasses { needed: usize, available: usize },

    /// An input tensor has the wrong shape for the operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Cosine geometry is undefined on a zero-norm feature row.
    #[error("zero-norm feature vector at row {0}")]
    ZeroVector(usize),

    /// A cluster id with no members reached center computation.
    #[error("empty cluster {0}")]
    EmptyCluster(usize),

    /// Smooth classifier update requested before any target classifier exists.
    #[error("no previous classifier state")]
    NoPreviousClassifier,

    /// A class label indexes past the classifier width.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Teacher and student logits cover different class counts.
    #[error("class count mismatch: {0} vs {1}")]
    ClassCountMismatch(usize, usize),

    /// A triplet batch has an anchor without a positive or a negative.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// Too few clusters this epoch to form a target batch.
    #[error("epoch skipped: {0}")]
    EpochSkipped(String),

    /// A query has no same-identity entry left in its filtered gallery.
    #[error("no valid gallery entry for query index {0}")]
    NoValidGallery(usize),

    /// The run state does not admit the requested operation.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// CLI/config-file level problem (bad key, unparsable value, missing path).
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
