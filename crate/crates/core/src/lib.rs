//! Class-incremental learning laboratory built around orthogonal weight
//! modification (OWM), with self-supervised proxy tasks and a feature
//! distillation upper-bound protocol.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::large_enum_variant)]

pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod objective;
pub mod oracle;
pub mod owm;
pub mod rng;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
