//! Speaker verification with multi-scale aggregation over a ResNet-34
//! extractor and a feature pyramid module.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autograd`] provide a
//! small double-precision differentiation engine, [`nn`] holds parameters and
//! basic layers, and the model modules ([`extractor`], [`fpm`], [`pooling`],
//! [`aggregation`], [`losses`]) build the networks on top of it.

pub mod aggregation;
pub mod autograd;
pub mod config;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod fpm;
pub mod frontend;
mod gemm;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod par;
pub mod pooling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
