//! Dense `f64` tensors with a reverse-mode tape.
//!
//! Values live in [`Tensor`]s; computation is recorded on a [`Graph`], which
//! hands out lightweight [`Var`] handles. Calling [`Graph::backward`] on a
//! scalar walks the tape once in reverse and returns [`Gradients`] for every
//! leaf that asked for one. [`Adam`] consumes those gradients.
//!
//! ```
//! use zeronorm_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```

mod graph;
mod kernels;
mod optim;
mod tensor;

pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use tensor::Tensor;

/// Default epsilon inside the LayerNorm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("backward usage error: {0}")]
    Usage(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Domain {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
