//! Dense matrices, reverse-mode differentiation and a finite-difference verifier.

pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod optim;
pub mod tensor;

pub use gradcheck::{analytic_gradient, check_gradient, LossBuilder};
pub use graph::{row_softmax_value, Graph, NodeId};
pub use io::NamedTensors;
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor2;

/// Guard used by divide, log and normalize wherever a denominator can vanish.
pub const GUARD_EPS: f64 = 1e-8;
