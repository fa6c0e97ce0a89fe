use std::path::PathBuf;

/// Errors produced anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid geometry in {op}: {reason}")]
    InvalidGeometry { op: &'static str, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("checkpoint error at byte offset {offset}: {reason}")]
    Checkpoint { offset: u64, reason: String },

    #[error("non-finite {what} at epoch {epoch}, step {step}{}", diagnostic_suffix(.diagnostic))]
    NonFinite {
        what: String,
        epoch: u64,
        step: u64,
        diagnostic: Option<PathBuf>,
    },

    #[error("no convergence after {iterations} iterations: {what}")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

fn diagnostic_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" (diagnostic checkpoint written to {})", p.display()),
        None => String::new(),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn geometry(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidGeometry {
            op,
            reason: reason.into(),
        }
    }
}
