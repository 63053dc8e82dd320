//! Parameterized layers, the builder that registers their tensors in a
//! [`ParamSet`], and the [`Recorder`] that replays them onto a [`Tape`].
//!
//! Initialization: truncated normal (std 0.02) for linear and 1x1
//! convolution weights, fan-in scaled normal for spatial kernels, zero
//! biases, batch-norm `gamma = 1`, `beta = 0`, running mean 0, running
//! variance 1.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nnops::{drop_path_mask, Activation, ConvGeometry, ConvParams, LinearParams, Mode, NormConfig};
use crate::params::{ParamId, ParamKind, ParamSet, StatUpdate};
use crate::rng::Rng;
use crate::tensor::{Element, Init, Shape, Tensor};

pub const LINEAR_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub geometry: ConvGeometry,
}

impl Conv2d {
    pub fn param_count(&self) -> u64 {
        let w = self.c_out * (self.c_in / self.geometry.groups) * self.kernel * self.kernel;
        (w + if self.bias.is_some() { self.c_out } else { 0 }) as u64
    }

    /// Output `(h, w)` for an input plane, or a geometry error.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.geometry.output_size(h, self.kernel), self.geometry.output_size(w, self.kernel)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::geometry("conv2d", format!("kernel {} does not fit {h}x{w}", self.kernel))),
        }
    }

    /// Multiply-accumulates per image: `C_out * (C_in / groups) * K^2 * H_out * W_out`.
    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        (self.c_out * (self.c_in / self.geometry.groups) * self.kernel * self.kernel) as u64 * (h_out * w_out) as u64
    }

    pub fn params<T: Element>(&self, set: &ParamSet<T>) -> ConvParams<T> {
        ConvParams {
            weight: set.value(self.weight).clone(),
            bias: self.bias.map(|b| set.value(b).clone()),
            geometry: self.geometry,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub config: NormConfig,
}

impl BatchNorm2d {
    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn param_count(&self) -> u64 {
        (self.in_features * self.out_features + if self.bias.is_some() { self.out_features } else { 0 }) as u64
    }

    /// Multiply-accumulates per image when applied at `positions` locations.
    pub fn macs(&self, positions: usize) -> u64 {
        (self.in_features * self.out_features) as u64 * positions as u64
    }

    pub fn params<T: Element>(&self, set: &ParamSet<T>) -> LinearParams<T> {
        LinearParams { weight: set.value(self.weight).clone(), bias: self.bias.map(|b| set.value(b).clone()) }
    }
}

/// Registers layer tensors under dotted, scoped names. Without an rng
/// every tensor is zero-filled, which is enough for structural queries.
pub struct ParamBuilder<'a, T> {
    set: &'a mut ParamSet<T>,
    rng: Option<&'a mut Rng>,
    scope: Vec<String>,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub fn new(set: &'a mut ParamSet<T>, rng: Option<&'a mut Rng>) -> Self {
        ParamBuilder { set, rng, scope: Vec::new() }
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn name(&self, leaf: &str) -> String {
        let mut parts = self.scope.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    fn tensor(&mut self, shape: Shape, init: impl FnOnce(&mut Rng) -> Init<'_>) -> Result<Tensor<T>> {
        match self.rng.as_deref_mut() {
            Some(rng) => Tensor::create(shape, init(rng)),
            None => Tensor::create(shape, Init::Zeros),
        }
    }

    fn push(&mut self, leaf: &str, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = self.name(leaf);
        self.set.push(name, kind, value)
    }

    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geometry: ConvGeometry,
        bias: bool,
    ) -> Result<Conv2d> {
        let groups = geometry.groups;
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) || kernel == 0 {
            return Err(Error::Config(format!(
                "conv {name}: groups {groups} must divide {c_in} -> {c_out}, kernel {kernel}"
            )));
        }
        self.scoped(name, |b| {
            let shape = Shape::new(c_out, c_in / groups, kernel, kernel);
            let fan_in = (c_in / groups) * kernel * kernel;
            let weight = if kernel == 1 {
                b.tensor(shape, |rng| Init::TruncNormal { rng, std: LINEAR_INIT_STD })?
            } else {
                b.tensor(shape, |rng| Init::Kaiming { rng, fan_in })?
            };
            let weight = b.push("weight", ParamKind::Learnable, weight)?;
            let bias =
                if bias { Some(b.push("bias", ParamKind::Learnable, Tensor::zeros([1, c_out, 1, 1]))?) } else { None };
            Ok(Conv2d { weight, bias, c_in, c_out, kernel, geometry })
        })
    }

    pub fn batchnorm(&mut self, name: &str, channels: usize, config: NormConfig) -> Result<BatchNorm2d> {
        self.scoped(name, |b| {
            let shape = Shape::new(1, channels, 1, 1);
            Ok(BatchNorm2d {
                gamma: b.push("gamma", ParamKind::Learnable, Tensor::full(shape, T::one()))?,
                beta: b.push("beta", ParamKind::Learnable, Tensor::zeros(shape))?,
                running_mean: b.push("running_mean", ParamKind::Buffer, Tensor::zeros(shape))?,
                running_var: b.push("running_var", ParamKind::Buffer, Tensor::full(shape, T::one()))?,
                channels,
                config,
            })
        })
    }

    pub fn linear(&mut self, name: &str, in_features: usize, out_features: usize, bias: bool) -> Result<Linear> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::Config(format!("linear {name}: {in_features} -> {out_features}")));
        }
        self.scoped(name, |b| {
            let w = b.tensor(Shape::new(in_features, out_features, 1, 1), |rng| Init::TruncNormal {
                rng,
                std: LINEAR_INIT_STD,
            })?;
            let weight = b.push("weight", ParamKind::Learnable, w)?;
            let bias = if bias {
                Some(b.push("bias", ParamKind::Learnable, Tensor::zeros([1, out_features, 1, 1]))?)
            } else {
                None
            };
            Ok(Linear { weight, bias, in_features, out_features })
        })
    }
}

/// Replays layers onto a tape. Parameters become leaf nodes on first use
/// (or can be pre-bound to existing nodes); train-mode batch statistics
/// are collected as [`StatUpdate`]s for the caller to apply.
pub struct Recorder<'a, T> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamSet<T>,
    bound: Vec<Option<NodeId>>,
    mode: Mode,
    drop_path_mode: Mode,
    rng: Option<&'a mut Rng>,
    updates: Vec<StatUpdate<T>>,
}

/// What a recording leaves behind besides the tape.
#[derive(Debug, Clone)]
pub struct Recording<T> {
    /// Tape node of every parameter that was used, by [`ParamId`] index.
    pub param_nodes: Vec<Option<NodeId>>,
    pub updates: Vec<StatUpdate<T>>,
}

impl<T> Recording<T> {
    pub fn node(&self, id: ParamId) -> Option<NodeId> {
        self.param_nodes[id.index()]
    }
}

impl<'a, T: Element> Recorder<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamSet<T>, mode: Mode, rng: Option<&'a mut Rng>) -> Self {
        Recorder { tape, params, bound: vec![None; params.len()], mode, drop_path_mode: mode, rng, updates: Vec::new() }
    }

    /// Overrides the mode used by drop-path only.
    pub fn with_drop_path_mode(mut self, mode: Mode) -> Self {
        self.drop_path_mode = mode;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    /// Uses an existing node for a parameter instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, node: NodeId) {
        self.bound[id.index()] = Some(node);
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.bound[id.index()] {
            return node;
        }
        let node = self.tape.leaf(self.params.value(id).clone());
        self.bound[id.index()] = Some(node);
        node
    }

    pub fn conv(&mut self, layer: &Conv2d, x: NodeId) -> Result<NodeId> {
        let w = self.param(layer.weight);
        let b = layer.bias.map(|b| self.param(b));
        self.tape.conv2d(x, w, b, layer.geometry)
    }

    pub fn linear(&mut self, layer: &Linear, x: NodeId) -> Result<NodeId> {
        let w = self.param(layer.weight);
        let b = layer.bias.map(|b| self.param(b));
        self.tape.linear(x, w, b)
    }

    pub fn batchnorm(&mut self, layer: &BatchNorm2d, x: NodeId) -> Result<NodeId> {
        let gamma = self.param(layer.gamma);
        let beta = self.param(layer.beta);
        let running = (self.params.value(layer.running_mean), self.params.value(layer.running_var));
        let (node, stats) = self.tape.batchnorm(x, gamma, beta, running, layer.config, self.mode)?;
        if let Some(stats) = stats {
            self.updates.push(StatUpdate {
                running_mean: layer.running_mean,
                running_var: layer.running_var,
                stats,
                momentum: layer.config.momentum,
            });
        }
        Ok(node)
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        self.tape.activation(x, kind)
    }

    /// Stochastic depth on a residual branch. Consumes randomness only in
    /// train mode with a positive rate.
    pub fn drop_path(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if self.drop_path_mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let batch = self.tape.value(x).dims()[0];
        let rng = self.rng.as_deref_mut().ok_or_else(|| Error::Contract("train-mode drop-path needs an rng".into()))?;
        match drop_path_mask(batch, rate, Mode::Train, rng)? {
            Some(mask) => self.tape.sample_scale(x, mask),
            None => Ok(x),
        }
    }

    pub fn finish(self) -> Recording<T> {
        Recording { param_nodes: self.bound, updates: self.updates }
    }
}
