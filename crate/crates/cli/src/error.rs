use kedit_core::numerics::NumericsError;
use kedit_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("missing artifact {path}: {hint}")]
    Missing { path: String, hint: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Invalid(msg.into())
}

impl From<NumericsError> for PipelineError {
    fn from(e: NumericsError) -> Self {
        PipelineError::Core(e.into())
    }
}

impl PipelineError {
    /// 2 validation, 3 divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Invalid(_) => 2,
            PipelineError::Missing { .. } | PipelineError::Io { .. } => 4,
            PipelineError::Core(e) => match e {
                CoreError::Divergence { .. } => 3,
                CoreError::Config(_) | CoreError::Compatibility(_) => 2,
                CoreError::Numerics(NumericsError::Io(_) | NumericsError::Format(_)) => 4,
                CoreError::Numerics(_) => 2,
                CoreError::Data(_) | CoreError::Io { .. } | CoreError::Json(_) | CoreError::Csv(_) => 4,
            },
        }
    }
}
