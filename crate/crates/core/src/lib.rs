//! Plain vision-transformer object detection.
//!
//! The crate builds a box detector around a single-scale, non-hierarchical ViT
//! backbone: window attention with a few cross-window propagation blocks, a
//! multi-scale pyramid derived from the last stride-`patch` feature map, and a
//! two-stage RPN + RoI head. Everything runs on a small float64 autodiff
//! engine so that every mechanism can be gradient-checked and ablated on
//! synthetic data at desk scale.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod nn;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
