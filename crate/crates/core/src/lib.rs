//! Histology-to-spatial-expression prediction.
//!
//! Two phases share one frozen image encoder:
//!
//! * **Representation learning** trains image, coordinate and gene encoders with a
//!   correlation-aware regression loss, a symmetric contrastive loss between the
//!   coordinate-guided morphology embedding and the gene embedding, and a
//!   multi-hop spatial topology loss ([`objectives`]).
//! * **Calibration** retrieves training-slide neighbours of each query in the
//!   frozen image-feature space, forms a temperature-softmax estimate and adds a
//!   magnitude-regularized residual from a small correction network
//!   ([`calibration`]).
//!
//! Everything numeric is generic over [`Real`] (`f32`/`f64`); the aliases below
//! fix the scalar to `f64`, which is what the experiment harness uses.

pub mod calibration;
pub mod cohort;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numkernel;
pub mod objectives;
pub mod scalar;

pub use error::{Error, Result};
pub use numkernel::{check_gradient, Graph, NodeId, Tensor2};
pub use scalar::Real;

/// Double-precision dense matrix.
pub type Tensor = Tensor2<f64>;
