//! Copies layer weights out of a `convformer-core` parameter set into the
//! plain structures the reference functions take. Only data moves here;
//! no arithmetic.

use convformer_core::backbone::Block as CoreBlock;
use convformer_core::layers::{BatchNorm2d, Conv2d, Linear};
use convformer_core::mca::Mca as CoreMca;
use convformer_core::params::ParamSet;
use convformer_core::tensor::{Element, Tensor};

use crate::{Block, Conv, Dense, Dims, Geometry, Mca, Norm};

pub fn values<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub fn tensor<T: Element>(t: &Tensor<T>) -> (Vec<f64>, Dims) {
    (values(t), t.dims())
}

pub fn conv<T: Element>(layer: &Conv2d, p: &ParamSet<T>) -> Conv {
    let g = layer.geometry;
    Conv {
        weight: values(p.value(layer.weight)),
        dims: p.value(layer.weight).dims(),
        bias: layer.bias.map(|b| values(p.value(b))),
        geometry: Geometry { stride: g.stride, padding: g.padding, dilation: g.dilation, groups: g.groups },
    }
}

pub fn norm<T: Element>(layer: &BatchNorm2d, p: &ParamSet<T>) -> Norm {
    Norm {
        gamma: values(p.value(layer.gamma)),
        beta: values(p.value(layer.beta)),
        mean: values(p.value(layer.running_mean)),
        var: values(p.value(layer.running_var)),
        eps: layer.config.epsilon,
    }
}

pub fn dense<T: Element>(layer: &Linear, p: &ParamSet<T>) -> Dense {
    Dense {
        weight: values(p.value(layer.weight)),
        out_features: layer.out_features,
        bias: layer.bias.map(|b| values(p.value(b))),
    }
}

pub fn mca<T: Element>(layer: &CoreMca, p: &ParamSet<T>) -> Mca {
    Mca {
        expand: conv(&layer.expand, p),
        branches: layer.branches.iter().map(|b| conv(b, p)).collect(),
        branch_norm: norm(&layer.branch_norm, p),
        reduce: conv(&layer.reduce, p),
        out: conv(&layer.out, p),
        proj: layer.proj.as_ref().map(|c| conv(c, p)),
        gate: layer.gate.as_ref().map(|g| (dense(&g.fc1, p), dense(&g.fc2, p))),
        inner_residual: layer.config.use_inner_residual,
    }
}

pub fn block<T: Element>(layer: &CoreBlock, p: &ParamSet<T>) -> Block {
    Block {
        norm1: norm(&layer.norm1, p),
        mca: mca(&layer.mca, p),
        norm2: norm(&layer.norm2, p),
        fc1: dense(&layer.fc1, p),
        fc2: dense(&layer.fc2, p),
    }
}
