//! Batch normalization over `(N, H, W)` per channel.
//!
//! Both the normalization path and the running variance use the biased
//! (`1/M`) variance estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

use super::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { epsilon: 1e-5, momentum: 0.1 }
    }
}

/// Parameters and statistics of one batch-norm layer. All four tensors
/// have shape `(1, C, 1, 1)`.
#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub config: NormConfig,
    pub mode: Mode,
}

impl<T: Element> BatchNormState<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize, config: NormConfig, mode: Mode) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        BatchNormState {
            gamma: Tensor::full(shape, T::one()),
            beta: Tensor::zeros(shape),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::full(shape, T::one()),
            config,
            mode,
        }
    }
}

/// Normalization statistics actually applied in a forward pass.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
}

fn check_channel(x: Shape, t: &Tensor<impl Element>, what: &str) -> Result<()> {
    if t.dims() != [1, x.c(), 1, 1] {
        return Err(Error::shape(
            "batchnorm2d",
            format!("{what} {} does not match {} channels of {x}", t.shape(), x.c()),
        ));
    }
    Ok(())
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub fn batch_stats<T: Element>(x: &Tensor<T>) -> Result<NormStats<T>> {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let count = n * plane;
    if count == 0 {
        return Err(Error::geometry("batchnorm2d", format!("no elements per channel in {}", x.shape())));
    }
    let inv = T::one() / T::from_f64(count as f64);
    let data = x.data();
    let (mean, var): (Vec<T>, Vec<T>) = (0..c)
        .into_par_iter()
        .map(|ch| {
            let planes = || (0..n).map(move |b| &data[(b * c + ch) * plane..][..plane]);
            let mean = planes().map(|p| p.iter().copied().sum::<T>()).sum::<T>() * inv;
            let var = planes().map(|p| p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>()).sum::<T>() * inv;
            (mean, var)
        })
        .unzip();
    Ok(NormStats { mean, var })
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn normalize<T: Element>(
    x: &Tensor<T>,
    stats: &NormStats<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    check_channel(x.shape(), gamma, "gamma")?;
    check_channel(x.shape(), beta, "beta")?;
    let [_, c, h, w] = x.dims();
    let plane = h * w;
    let eps = T::from_f64(epsilon);
    let mut out = x.data().to_vec();
    if plane > 0 {
        out.par_chunks_mut(plane).enumerate().for_each(|(idx, p)| {
            let ch = idx % c;
            let scale = gamma.data()[ch] / (stats.var[ch] + eps).sqrt();
            let shift = beta.data()[ch];
            let mean = stats.mean[ch];
            p.iter_mut().for_each(|v| *v = (*v - mean) * scale + shift);
        });
    }
    Ok(Tensor::from_parts(x.shape(), out))
}

/// Forward pass. In train mode, normalizes with batch statistics and
/// updates the running statistics by exponential moving average; in eval
/// mode uses the running statistics and leaves the state untouched.
pub fn batchnorm2d<T: Element>(x: &Tensor<T>, s: &mut BatchNormState<T>) -> Result<Tensor<T>> {
    check_channel(x.shape(), &s.running_mean, "running_mean")?;
    check_channel(x.shape(), &s.running_var, "running_var")?;
    match s.mode {
        Mode::Eval => {
            let stats = NormStats { mean: s.running_mean.data().to_vec(), var: s.running_var.data().to_vec() };
            normalize(x, &stats, &s.gamma, &s.beta, s.config.epsilon)
        }
        Mode::Train => {
            let stats = batch_stats(x)?;
            let y = normalize(x, &stats, &s.gamma, &s.beta, s.config.epsilon)?;
            update_running(&mut s.running_mean, &mut s.running_var, &stats, s.config.momentum);
            Ok(y)
        }
    }
}

pub fn update_running<T: Element>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &NormStats<T>,
    momentum: f64,
) {
    let m = T::from_f64(momentum);
    let keep = T::one() - m;
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + m * b;
    }
}

#[derive(Debug, Clone)]
pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward pass. `batch_coupled` selects the train-mode formula, where
/// the statistics themselves depend on `x`.
pub fn batchnorm2d_backward<T: Element>(
    x: &Tensor<T>,
    stats: &NormStats<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    epsilon: f64,
    batch_coupled: bool,
) -> Result<NormGrads<T>> {
    if grad_out.shape() != x.shape() {
        return Err(Error::mismatch("batchnorm2d_backward", grad_out.shape(), x.shape()));
    }
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let eps = T::from_f64(epsilon);
    let count = T::from_f64((n * plane) as f64);
    let xd = x.data();
    let gd = grad_out.data();

    // per channel: (sum dy, sum dy * xhat)
    let sums: Vec<(T, T)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let inv_std = T::one() / (stats.var[ch] + eps).sqrt();
            let mean = stats.mean[ch];
            let mut s_dy = T::zero();
            let mut s_dyx = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for (&xv, &gv) in xd[off..off + plane].iter().zip(&gd[off..off + plane]) {
                    s_dy = s_dy + gv;
                    s_dyx = s_dyx + gv * (xv - mean) * inv_std;
                }
            }
            (s_dy, s_dyx)
        })
        .collect();

    let mut gx = vec![T::zero(); x.len()];
    if plane > 0 {
        gx.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
            let ch = idx % c;
            let off = idx * plane;
            let inv_std = T::one() / (stats.var[ch] + eps).sqrt();
            let g = gamma.data()[ch];
            let mean = stats.mean[ch];
            let (s_dy, s_dyx) = sums[ch];
            for (j, d) in dst.iter_mut().enumerate() {
                let dy = gd[off + j];
                *d = if batch_coupled {
                    let xhat = (xd[off + j] - mean) * inv_std;
                    g * inv_std * (dy - s_dy / count - xhat * s_dyx / count)
                } else {
                    g * inv_std * dy
                };
            }
        });
    }

    let ch_shape = Shape::new(1, c, 1, 1);
    Ok(NormGrads {
        input: Tensor::from_parts(x.shape(), gx),
        gamma: Tensor::from_parts(ch_shape, sums.iter().map(|s| s.1).collect()),
        beta: Tensor::from_parts(ch_shape, sums.iter().map(|s| s.0).collect()),
    })
}
