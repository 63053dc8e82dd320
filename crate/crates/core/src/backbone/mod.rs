//! The four-stage ConvFormer backbone: convolutional stem, stages of
//! MCA blocks separated by stride-2 downsamples, and a classification head.

mod config;
mod model;

pub use config::{Ablation, ModelConfig, StageSpec};
pub use model::{build_model, Architecture, Block, ConvFormerBlock, Downsample, Head, Model, Stage, Stem, Trace};
