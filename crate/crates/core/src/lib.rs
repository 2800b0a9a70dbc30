//! Tabular deep learning toolkit: MLP, ResNet and FT-Transformer models on a
//! small reverse-mode autodiff engine, with the preprocessing, training,
//! ensembling, synthetic-benchmark and attribution machinery around them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod par;
pub mod param;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use par::Exec;
pub use tensor::{Gradients, ParamId, Tape, Tensor, Var};
