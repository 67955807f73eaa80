//! Multimodal classification with conditional reconstruction of missing
//! modalities, sparse mixture-of-experts fusion and additive evidence attribution.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod cer;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod evidence;
pub mod fullcheck;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use config::TrainConfig;
pub use data::Dataset;
pub use error::{CerdError, Result};
pub use model::CerdModel;
