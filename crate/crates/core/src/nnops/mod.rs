//! Neural-network primitives: forward kernels and the matching backward
//! kernels used by the tape.

mod activation;
mod conv;
mod drop_path;
mod gemm;
mod linear;
mod norm;
mod pool;

use serde::{Deserialize, Serialize};

pub use activation::{activation, activation_backward, sigmoid, Activation};
pub use conv::{conv2d, conv2d_backward, conv2d_forward, ConvGeometry, ConvGrads, ConvParams};
pub use drop_path::{apply_sample_scale, drop_path, drop_path_mask};
pub use gemm::{gemm, MatView};
pub use linear::{linear, linear_backward, linear_forward, LinearGrads, LinearParams};
pub use norm::{
    batch_stats, batchnorm2d, batchnorm2d_backward, normalize, update_running, BatchNormState, NormConfig, NormGrads,
    NormStats,
};
pub use pool::{global_avg_pool, global_avg_pool_backward};

/// Train mode uses batch statistics and stochastic depth; eval mode is a
/// pure function of inputs and frozen state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}
