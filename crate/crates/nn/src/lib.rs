//! Minimal neural-network substrate for small CPU models.
//!
//! Everything runs in `f64` on a single thread: dense row-major
//! [`Tensor`]s, a tape-based reverse-mode [`Graph`], multilayer
//! perceptrons ([`Mlp`]), the Adam optimizer, finite-difference gradient
//! checking and a JSON checkpoint format.
//!
//! A training step builds a fresh [`Graph`], binds the parameters as
//! leaves, records the forward pass and consumes the graph in
//! [`Graph::backward`]:
//!
//! ```
//! use sparseset_nn::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::scalar(3.0));
//! let loss = g.square(w);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
//! ```

mod adam;
mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod mlp;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use error::NnError;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use mlp::{mlp_forward, Activation, Dense, Mlp, MlpConfig, MlpVars};
pub use tensor::Tensor;

pub type Result<T, E = NnError> = std::result::Result<T, E>;
