use std::path::PathBuf;

use crate::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("class {class}: {reason}")]
    ClassConfig { class: ClassId, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("selection error: requested {requested} of {available} candidates")]
    Selection { requested: usize, available: usize },

    #[error("selection policy violates the monotone proportion rule for classes {a} and {b}: |D_a| = {size_a} <= |D_b| = {size_b} but p_a = {p_a} < p_b = {p_b}")]
    Policy {
        a: ClassId,
        b: ClassId,
        size_a: usize,
        size_b: usize,
        p_a: f64,
        p_b: f64,
    },

    #[error("selection policy: {0}")]
    PolicyTable(String),

    #[error("exemplar update: class {0} has no candidates")]
    EmptyClass(ClassId),

    #[error("evaluation error: class {0} has no prototype samples")]
    MissingPrototype(ClassId),

    #[error("arithmetic domain error: {0}")]
    Domain(String),

    #[error("training diverged in session {session}, epoch {epoch}: loss = {loss}")]
    Diverged { session: usize, epoch: usize, loss: f64 },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
