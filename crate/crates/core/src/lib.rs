//! Pixel-based autoregressive language modelling: render text into binary
//! patches, train a decoder-only transformer to predict the next patches,
//! refine it adversarially, then generate, recognize and evaluate.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod inference;
pub mod model;
pub mod textrender;
pub mod training;

pub use error::{Error, Result};
