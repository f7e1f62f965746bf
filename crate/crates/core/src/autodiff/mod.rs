//! Reverse-mode differentiation over dense tensors, parameters and Adam.

mod adam;
mod param;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState, DEFAULT_LR};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, OpKind, SparsePattern, Tape, Var};
