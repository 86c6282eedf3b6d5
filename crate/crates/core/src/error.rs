use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cholesky decomposition failed at pivot {pivot} (value {value:e}): matrix is not positive definite")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("{factor} factor of layer {layer} is not positive definite (pivot {pivot}); increase tau")]
    PosteriorNotPd {
        layer: usize,
        factor: &'static str,
        pivot: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss originating in layer {layer}")]
    NonFinite { layer: usize },

    #[error("state space too large for enumeration: {states} assignments (limit {limit})")]
    StateSpaceTooLarge { states: f64, limit: usize },

    #[error("CRF training diverged at iteration {iteration}: theta = ({theta_u}, {theta_p})")]
    Diverged {
        iteration: usize,
        theta_u: f64,
        theta_p: f64,
    },

    #[error("schema error in {path}: field `{field}`: {message}")]
    Schema {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn schema(path: &std::path::Path, field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema {
            path: path.to_path_buf(),
            field: field.into(),
            message: msg.into(),
        }
    }

    /// True for failures of the numerics (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::PosteriorNotPd { .. }
            | Error::NonFinite { .. }
            | Error::Diverged { .. } => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
