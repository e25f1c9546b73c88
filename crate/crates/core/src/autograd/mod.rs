//! Dense tensors and a reverse-mode tape.
//!
//! Every forward computation records its primitives on a [`Tape`]; a single
//! reverse sweep from a scalar loss fills in gradients for the leaves that
//! asked for them. Parameters live outside the tape in a [`ParamStore`] and
//! are bound to leaves per [`Session`], so independent tapes can share one
//! read-only store.

mod linalg;
mod params;
mod tape;
mod tensor;

pub use params::{poly_lr, sgd_poly_step, ParamId, ParamStore, Session, SgdConfig, SgdState};
pub use tape::{
    BackwardFault, BinaryKind, Gradients, Numerics, OpKind, ReduceKind, Tape, UnaryKind, Var,
};
pub use tensor::{numel, Precision, Real, Tensor};

#[cfg(test)]
mod tests;
