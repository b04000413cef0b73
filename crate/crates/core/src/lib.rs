//! Weighted triplet-loss Siamese encoders for predicting how far a scan is from
//! conversion to Alzheimer's Disease on an ordinal progression scale.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cohort;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod tsne;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
pub use loss::{alpha_of, Alpha, LossKind, ProgressionLevel};
pub use tensor::{Tape, Tensor, Var};
