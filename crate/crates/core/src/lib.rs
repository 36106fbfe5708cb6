//! Few-shot image classification with transformation-decoding pretraining.
//!
//! An encoder is pretrained on base classes with a cross-entropy loss plus a
//! weighted loss for recovering a random projective warp from the features
//! of an image and its warped copy. Novel classes are then added by weight
//! imprinting followed by optional fine-tuning, and evaluated either on fixed
//! test splits or with N-way K-shot episodes.

// `!(x >= lo)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod par;
pub mod seed;
pub mod tensor;
pub mod transforms;
pub mod model;
pub mod data;
pub mod training;
pub mod evaluation;

pub use error::{FlatError, Result};
pub use par::Exec;
