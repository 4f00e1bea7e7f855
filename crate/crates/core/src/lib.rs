//! Causal basis block (CBB) for feature-level front-door adjustment.
//!
//! The block estimates two feature expectations by projecting query-reweighted
//! features onto learnable low-rank bases, one for the input features and one
//! for convolutional mediator features, and returns their sum together with
//! the mediator: `F = E[X] + E[M] + M`.
//!
//! Alongside the block this crate ships:
//!
//! * [`tensor`] / [`autodiff`]: a small dense tensor type and a tape-based
//!   reverse-mode engine with SGD, enough to train the block end to end.
//! * [`oracle`]: exact enumeration over discrete structural causal models
//!   (`Z -> X -> M -> Y`, `Z -> Y`) for observational, back-door, front-door
//!   and interventional distributions.
//! * [`bench`]: a synthetic confounded-domain benchmark comparing a linear
//!   baseline with a CBB-equipped classifier under domain shift.
//! * [`gradcheck`]: central finite-difference checks over every learnable.

#![deny(unsafe_code)]

pub mod autodiff;
pub mod bench;
pub mod cbb;
pub mod error;
pub mod gradcheck;
pub mod oracle;
pub mod tensor;

pub use error::{CbbError, Result};
pub use tensor::Tensor;
