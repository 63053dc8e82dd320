use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("geometry error in {op}: {detail}")]
    Geometry { op: &'static str, detail: String },

    #[error("tensor of shape {0:?} overflows the index range")]
    Size([usize; 4]),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn geometry(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Geometry { op, detail: detail.into() }
    }

    pub(crate) fn mismatch(op: &'static str, a: Shape, b: Shape) -> Self {
        Error::shape(op, format!("{a} vs {b}"))
    }
}
