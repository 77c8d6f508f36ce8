//! Multimodal fused-image translator built on selective state-space scans.
//!
//! The crate is organized bottom-up: a small channel-last tensor engine with
//! reverse-mode differentiation ([`autograd`], [`tensor`]), the selective scan
//! and its four-direction image variant ([`ssm`]), mask/image/text cross
//! attention ([`attention`]), the block stack ([`blocks`]) and full
//! translator ([`model`]), the training objective ([`losses`]), and the data,
//! metric and training machinery around them.

pub mod attention;
pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod trainer;

pub use autograd::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
