#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod res2;
pub mod selftest;
pub mod skip;
pub mod swin;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, SwinResNet};
