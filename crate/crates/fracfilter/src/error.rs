use thiserror::Error;

/// Errors surfaced by mesh construction, assembly, solvers, and filters.
#[derive(Debug, Error)]
pub enum FfError {
    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("singular operator: {0}")]
    SingularOperator(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("step {step}, iteration {iteration}: {source}")]
    AtStep {
        step: usize,
        iteration: usize,
        #[source]
        source: Box<FfError>,
    },

    #[error("{module}: {source}")]
    InModule {
        module: &'static str,
        #[source]
        source: Box<FfError>,
    },
}

impl FfError {
    /// Wraps the error with the assimilation step and inner iteration it
    /// occurred in.
    pub fn at_step(self, step: usize, iteration: usize) -> Self {
        FfError::AtStep {
            step,
            iteration,
            source: Box::new(self),
        }
    }

    /// Wraps the error with the component it came from.
    pub fn in_module(self, module: &'static str) -> Self {
        FfError::InModule {
            module,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, FfError>;

/// Checks that a slice has the expected length.
pub fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(FfError::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
