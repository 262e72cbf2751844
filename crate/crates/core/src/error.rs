use thiserror::Error;

/// Errors produced by the inference routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular moment: {0}")]
    SingularMoment(String),

    #[error("ill-conditioned system (condition estimate {condition:.3e}){}", iteration_suffix(*.iteration))]
    IllConditioned {
        condition: f64,
        iteration: Option<usize>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate hyperparameter update: {0}")]
    DegenerateUpdate(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("eigendecomposition failed at batch {batch}")]
    Eigen { batch: usize },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn iteration_suffix(iteration: Option<usize>) -> String {
    match iteration {
        Some(t) => format!(" at iteration {t}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn at_iteration(self, t: usize) -> Self {
        match self {
            Error::IllConditioned { condition, .. } => Error::IllConditioned {
                condition,
                iteration: Some(t),
            },
            other => other,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
