//! ConvFormer: a convolutional backbone built from multi-kernel
//! convolutional attention (MCA) blocks, with a small CPU tensor library,
//! reverse-mode gradients, cost accounting and a toy training loop.

pub mod accounting;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod layers;
pub mod mca;
pub mod nnops;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor, Tensor64};
