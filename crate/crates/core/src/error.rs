use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate vector: norm {norm:e} is below the 1e-8 floor")]
    DegenerateVector { norm: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("optimizer refused step: parameter `{param}` has a non-finite gradient")]
    Optimizer { param: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("training data error: {0}")]
    TrainingData(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("{path}:{line}: {message}")]
    Load {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
