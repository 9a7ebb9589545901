//! Multiplicative adversarial training.
//!
//! xAT and xVAT regularize a classifier with adversarial *masks*: per-pixel
//! gates `z ∈ [0, 1]` drawn from a hard concrete distribution and applied as
//! `x ⊙ εz`. The mask parameters ascend a divergence-plus-L0 objective while
//! the classifier descends the consistency loss, both from one backward pass.
//! The additive baselines AT and VAT are included for comparison.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod hard_concrete;
pub mod nn;
pub mod perturb;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
