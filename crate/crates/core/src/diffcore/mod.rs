//! Reverse-mode differentiation over dense 2-D `f64` tensors.
//!
//! Every model equation is expressed through [`Tape`] ops so that parameter
//! gradients come from one generic backward pass instead of per-layer
//! derivations. A tape is rebuilt for every forward pass and owned by a
//! single thread; plain [`Tensor`] values are immutable and shareable.

mod tape;
mod tensor;

pub use tape::{masked_softmax, Gradients, Tape, Var};
pub use tensor::{Mask, Tensor};

pub(crate) use tape::sym_normalize;
