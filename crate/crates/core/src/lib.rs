//! Factorization of convolution kernels into pointwise and depthwise parts.
//!
//! A standard `D×D×M×N` kernel can be expressed as a generalized elementwise
//! product of a pointwise and a depthwise kernel. This crate provides the
//! products ([`gep`]), reference convolutions ([`conv`]), the factorized
//! forward passes ([`falcon`]), kernel fitting ([`fit`]), parameter/FLOP
//! counting ([`analysis`]) and the file formats and commands behind the
//! `falcon` binary ([`cli`]).

pub mod analysis;
pub mod cli;
pub mod conv;
pub mod error;
pub mod falcon;
pub mod fit;
pub mod gep;
pub mod optim;
pub mod svd;
pub mod tensor;

pub use error::{Error, Result};
pub use gep::{DpconvFactors, FalconFactors, FalconPair};
pub use tensor::{ConvDims, Tensor};
