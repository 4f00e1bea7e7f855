//! Tape-based reverse-mode differentiation and the SGD optimizer.

mod optim;
mod tape;

pub use optim::{Sgd, SgdConfig};
pub use tape::{FaultInjection, OpKind, Tape, Var};
