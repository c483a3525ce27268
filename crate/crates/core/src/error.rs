use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema not found: unknown scoring method `{0}`")]
    SchemaNotFound(String),

    #[error("unknown term `{term}` for scoring method {method}")]
    UnknownTerm { method: String, term: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("insufficient donors: requested {requested}, only {available} available")]
    InsufficientDonors { requested: usize, available: usize },

    #[error("body-part classification aborted: {failures} of {total} records failed")]
    ClassifierAborted { failures: usize, total: usize },

    #[error("class {class} has {count} record(s); at least 2 are needed to split")]
    UnsplittableClass { class: String, count: usize },

    #[error("record {image_id} has no {method} label")]
    MissingLabel { image_id: String, method: String },

    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("cannot acquire weights for backbone {backbone}: {hint}")]
    Acquisition { backbone: String, hint: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no training data")]
    NoData,

    #[error("training diverged in stage {stage} at epoch {epoch} (loss is not finite)")]
    TrainingDiverged { stage: u8, epoch: usize },

    #[error("cannot decode image {what}: {message}")]
    Decode { what: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("duplicate label: rater {rater} already labeled {image_id} under {method}")]
    DuplicateLabel {
        rater: String,
        image_id: String,
        method: String,
    },

    #[error("unknown rater `{0}`")]
    UnknownRater(String),

    #[error("rater {rater} is incomplete for {method}: {} image(s) missing", missing.len())]
    Incomplete {
        rater: String,
        method: String,
        missing: Vec<String>,
    },

    #[error("degenerate agreement: all ratings fall in a single category, kappa is undefined")]
    DegenerateAgreement,

    #[error("not found: {0}")]
    NotFound(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad input rather than by the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::SchemaNotFound(_)
                | Error::UnknownTerm { .. }
                | Error::Parse { .. }
                | Error::Json(_)
                | Error::InsufficientDonors { .. }
                | Error::UnsplittableClass { .. }
                | Error::MissingLabel { .. }
                | Error::InvalidLogits(_)
                | Error::InvalidConfig(_)
                | Error::Validation(_)
                | Error::Incompatible(_)
                | Error::ProtocolViolation(_)
                | Error::DuplicateLabel { .. }
                | Error::UnknownRater(_)
                | Error::Incomplete { .. }
                | Error::DegenerateAgreement
        )
    }
}
