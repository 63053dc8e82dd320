//! Multi-kernel convolutional attention.
//!
//! ```text
//! X_E  = Conv1x1_expand(X)                         C -> N*C
//! X_i  = DConv_{k_i, d_i}(X_E)                     per branch, same padding
//! X_P  = ReLU(BN(X_1 + X_2 + X_3))
//! X'   = X + Conv1x1_reduce(X_P)                   N*C -> C
//! Attn = Sigmoid(FC_2(ReLU(FC_1(GAP(X)))))
//! Out  = Proj(Attn * Conv1x1_out(X'))
//! ```
//!
//! `Proj` is a bias-free 1x1 convolution (toggle `use_output_proj`). The
//! ablation toggles drop the expansion (`N = 1`), replace the parallel
//! branches by a single `7x7` dilation-3 branch, drop the inner residual,
//! or drop the gate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Linear, ParamBuilder, Recorder};
use crate::nnops::{Activation, ConvGeometry, Mode, NormConfig};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub kernel: usize,
    pub dilation: usize,
}

impl BranchSpec {
    pub const fn new(kernel: usize, dilation: usize) -> Self {
        BranchSpec { kernel, dilation }
    }
}

/// Block-level settings shared by every MCA in a model; the channel count
/// comes from the stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McaConfig {
    /// Channel expansion factor `N` of the parallel branch.
    pub expand: usize,
    pub branches: Vec<BranchSpec>,
    /// The branch used when `use_parallel` is off.
    pub single_branch: BranchSpec,
    /// Hidden width of the gate is `C / gate_reduction`.
    pub gate_reduction: usize,
    pub use_expand: bool,
    pub use_parallel: bool,
    pub use_inner_residual: bool,
    pub use_gating: bool,
    pub use_output_proj: bool,
}

impl Default for McaConfig {
    fn default() -> Self {
        McaConfig {
            expand: 4,
            branches: vec![BranchSpec::new(3, 1), BranchSpec::new(5, 2), BranchSpec::new(7, 3)],
            single_branch: BranchSpec::new(7, 3),
            gate_reduction: 1,
            use_expand: true,
            use_parallel: true,
            use_inner_residual: true,
            use_gating: true,
            use_output_proj: true,
        }
    }
}

impl McaConfig {
    pub fn effective_expand(&self) -> usize {
        if self.use_expand {
            self.expand
        } else {
            1
        }
    }

    pub fn effective_branches(&self) -> Vec<BranchSpec> {
        if self.use_parallel {
            self.branches.clone()
        } else {
            vec![self.single_branch]
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if channels == 0 || self.expand == 0 {
            return Err(Error::Config(format!("channels {channels} and expand {} must be positive", self.expand)));
        }
        let branches = self.effective_branches();
        if branches.is_empty() {
            return Err(Error::Config("at least one branch is required".into()));
        }
        for b in &branches {
            if b.kernel % 2 == 0 || b.dilation == 0 {
                return Err(Error::Config(format!(
                    "branch {}x{} dilation {} cannot preserve spatial size",
                    b.kernel, b.kernel, b.dilation
                )));
            }
        }
        if self.use_gating && (self.gate_reduction == 0 || !channels.is_multiple_of(self.gate_reduction)) {
            return Err(Error::Config(format!(
                "gate reduction {} must divide {channels} channels",
                self.gate_reduction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Layer handles of one MCA block.
#[derive(Debug, Clone, PartialEq)]
pub struct Mca {
    pub channels: usize,
    pub config: McaConfig,
    pub expand: Conv2d,
    pub branches: Vec<Conv2d>,
    pub branch_norm: BatchNorm2d,
    pub reduce: Conv2d,
    pub out: Conv2d,
    pub proj: Option<Conv2d>,
    pub gate: Option<Gate>,
}

impl Mca {
    pub fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        channels: usize,
        config: &McaConfig,
        norm: NormConfig,
    ) -> Result<Mca> {
        config.validate(channels)?;
        let hidden = channels * config.effective_expand();
        let pointwise = ConvGeometry::default();
        let expand = b.conv("expand", channels, hidden, 1, pointwise, true)?;
        let branches = config
            .effective_branches()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let g = ConvGeometry::same(s.kernel, s.dilation, hidden);
                b.conv(&format!("branches.{i}"), hidden, hidden, s.kernel, g, false)
            })
            .collect::<Result<Vec<_>>>()?;
        let branch_norm = b.batchnorm("branch_norm", hidden, norm)?;
        let reduce = b.conv("reduce", hidden, channels, 1, pointwise, true)?;
        let out = b.conv("out", channels, channels, 1, pointwise, true)?;
        let proj =
            if config.use_output_proj { Some(b.conv("proj", channels, channels, 1, pointwise, false)?) } else { None };
        let gate = if config.use_gating {
            let width = channels / config.gate_reduction;
            Some(b.scoped("gate", |b| {
                Ok(Gate { fc1: b.linear("fc1", channels, width, true)?, fc2: b.linear("fc2", width, channels, true)? })
            })?)
        } else {
            None
        };
        Ok(Mca { channels, config: config.clone(), expand, branches, branch_norm, reduce, out, proj, gate })
    }

    fn check_input<T: Element>(&self, tape: &Tape<T>, x: NodeId) -> Result<()> {
        let c = tape.value(x).dims()[1];
        if c != self.channels {
            return Err(Error::shape("mca", format!("input has {c} channels, block expects {}", self.channels)));
        }
        Ok(())
    }

    /// Attention vector `(N, C, 1, 1)` in `(0, 1)` computed from the block
    /// input, or an error when the block has no gate.
    pub fn record_gate<T: Element>(&self, rec: &mut Recorder<'_, T>, x: NodeId) -> Result<NodeId> {
        let gate = self.gate.as_ref().ok_or_else(|| Error::Config("block has no gating branch".into()))?;
        self.check_input(rec.tape, x)?;
        let pooled = rec.tape.global_avg_pool(x)?;
        let v = rec.linear(&gate.fc1, pooled)?;
        let v = rec.activation(v, Activation::Relu)?;
        let a = rec.linear(&gate.fc2, v)?;
        rec.activation(a, Activation::Sigmoid)
    }

    pub fn record<T: Element>(&self, rec: &mut Recorder<'_, T>, x: NodeId) -> Result<NodeId> {
        self.check_input(rec.tape, x)?;
        let expanded = rec.conv(&self.expand, x)?;
        let mut fused: Option<NodeId> = None;
        for branch in &self.branches {
            let y = rec.conv(branch, expanded)?;
            fused = Some(match fused {
                Some(acc) => rec.tape.add(acc, y)?,
                None => y,
            });
        }
        let fused = fused.expect("validated: at least one branch");
        let fused = rec.batchnorm(&self.branch_norm, fused)?;
        let fused = rec.activation(fused, Activation::Relu)?;
        let reduced = rec.conv(&self.reduce, fused)?;
        let inner = if self.config.use_inner_residual { rec.tape.add(x, reduced)? } else { reduced };
        let mut out = rec.conv(&self.out, inner)?;
        if self.gate.is_some() {
            let attn = self.record_gate(rec, x)?;
            out = rec.tape.mul_channelwise(out, attn)?;
        }
        if let Some(proj) = &self.proj {
            out = rec.conv(proj, out)?;
        }
        Ok(out)
    }

    pub fn param_count(&self) -> u64 {
        let mut total = self.expand.param_count()
            + self.branches.iter().map(Conv2d::param_count).sum::<u64>()
            + self.branch_norm.param_count()
            + self.reduce.param_count()
            + self.out.param_count();
        total += self.proj.as_ref().map_or(0, Conv2d::param_count);
        total += self.gate.as_ref().map_or(0, |g| g.fc1.param_count() + g.fc2.param_count());
        total
    }
}

/// A standalone MCA block owning its parameters.
#[derive(Debug, Clone)]
pub struct McaBlock<T> {
    pub layer: Mca,
    pub params: ParamSet<T>,
}

impl<T: Element> McaBlock<T> {
    pub fn new(channels: usize, config: &McaConfig, norm: NormConfig, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let layer = Mca::build(&mut ParamBuilder::new(&mut params, Some(rng)), channels, config, norm)?;
        Ok(McaBlock { layer, params })
    }

    /// Forward pass. In train mode the branch batch-norm running
    /// statistics are updated.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let mut rec = Recorder::new(&mut tape, &self.params, mode, None);
        let out = self.layer.record(&mut rec, input)?;
        let recording = rec.finish();
        self.params.apply_stat_updates(&recording.updates);
        Ok(tape.value(out).clone())
    }

    pub fn attention(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let mut rec = Recorder::new(&mut tape, &self.params, Mode::Eval, None);
        let out = self.layer.record_gate(&mut rec, input)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn input(shape: [usize; 4], seed: u64) -> Tensor {
        Tensor::create(shape, Init::Uniform { rng: &mut Rng::seed(seed), lo: -1.0, hi: 1.0 }).unwrap()
    }

    fn block(channels: usize, config: &McaConfig, seed: u64) -> McaBlock<f32> {
        McaBlock::new(channels, config, NormConfig::default(), &mut Rng::seed(seed)).unwrap()
    }

    #[test]
    fn shape_is_preserved_for_every_toggle() {
        for bits in 0..32u32 {
            let cfg = McaConfig {
                use_expand: bits & 1 != 0,
                use_parallel: bits & 2 != 0,
                use_inner_residual: bits & 4 != 0,
                use_gating: bits & 8 != 0,
                use_output_proj: bits & 16 != 0,
                ..McaConfig::default()
            };
            let mut b = block(8, &cfg, u64::from(bits));
            let x = input([2, 8, 6, 5], 1);
            assert_eq!(b.forward(&x, Mode::Eval).unwrap().dims(), [2, 8, 6, 5]);
        }
    }

    #[test]
    fn zero_out_conv_annihilates() {
        let mut b = block(8, &McaConfig::default(), 2);
        let w = b.layer.out.weight;
        let bias = b.layer.out.bias.unwrap();
        b.params.value_mut(w).data_mut().fill(0.0);
        b.params.value_mut(bias).data_mut().fill(0.0);
        let y = b.forward(&input([1, 8, 6, 6], 3), Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_gives_half() {
        let mut b = block(8, &McaConfig::default(), 4);
        let gate = b.layer.gate.clone().unwrap();
        for id in [gate.fc1.weight, gate.fc1.bias.unwrap(), gate.fc2.weight, gate.fc2.bias.unwrap()] {
            b.params.value_mut(id).data_mut().fill(0.0);
        }
        let attn = b.attention(&input([2, 8, 5, 5], 5)).unwrap();
        assert!(attn.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_reduction_must_divide_channels() {
        let cfg = McaConfig { gate_reduction: 3, ..McaConfig::default() };
        let r = McaBlock::<f32>::new(8, &cfg, NormConfig::default(), &mut Rng::seed(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut b = block(8, &McaConfig::default(), 6);
        assert!(matches!(b.forward(&input([1, 4, 6, 6], 1), Mode::Eval), Err(Error::Shape { .. })));
    }

    #[test]
    fn gating_ablation_removes_expected_params() {
        let c = 16;
        for rg in [1, 2, 4] {
            let on = McaConfig { gate_reduction: rg, ..McaConfig::default() };
            let off = McaConfig { use_gating: false, ..on.clone() };
            let delta = block(c, &on, 0).layer.param_count() - block(c, &off, 0).layer.param_count();
            let expected = 2 * (c * c / rg) + c / rg + c;
            assert_eq!(delta, expected as u64);
        }
    }

    #[test]
    fn param_count_matches_tensors() {
        let b = block(12, &McaConfig { gate_reduction: 4, ..McaConfig::default() }, 9);
        assert_eq!(b.layer.param_count(), b.params.learnable_count() as u64);
    }
}
