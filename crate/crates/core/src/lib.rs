//! Quotient networks: blocks that learn a multiplicative quotient
//! `H(x) = F(x) * x` in place of the residual `H(x) = F(x) + x`, a matched
//! residual baseline, and the CIFAR training and ablation stack around them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod autograd;
pub mod blocks;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
