//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every primitive's reverse rule is itself a composition of primitives, so a
//! reverse pass can be recorded onto the tape and differentiated again. This
//! is how gradients of losses that contain gradients (double backprop) are
//! obtained.

mod backward;
pub(crate) mod op;
mod param;
mod tape;

pub use op::Routes;
pub use param::{sgd_update, Parameter};
pub use tape::{Tape, VarId};
