use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Linear, ParamBuilder, Recorder, Recording};
use crate::mca::Mca;
use crate::nnops::{Activation, ConvGeometry, Mode, NormConfig};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

use super::config::{ModelConfig, StageSpec};

/// `7x7/2 -> 3x3/1 -> 2x2/2`, each followed by batch norm; the first two
/// also by ReLU. Reduces resolution by 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub convs: Vec<Conv2d>,
    pub norms: Vec<BatchNorm2d>,
}

impl Stem {
    fn build<T: Element>(b: &mut ParamBuilder<'_, T>, out: usize, bias: bool, norm: NormConfig) -> Result<Stem> {
        let layers = [
            (3, 7, ConvGeometry::strided(2, 3)),
            (out, 3, ConvGeometry::strided(1, 1)),
            (out, 2, ConvGeometry::strided(2, 0)),
        ];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (i, (c_in, k, g)) in layers.into_iter().enumerate() {
            convs.push(b.conv(&format!("conv{}", i + 1), c_in, out, k, g, bias)?);
            norms.push(b.batchnorm(&format!("norm{}", i + 1), out, norm)?);
        }
        Ok(Stem { convs, norms })
    }

    pub fn record<T: Element>(&self, rec: &mut Recorder<'_, T>, images: NodeId) -> Result<NodeId> {
        let [_, c, h, w] = rec.tape.value(images).dims();
        if c != 3 {
            return Err(Error::shape("conv_stem", format!("expected 3 input channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::geometry("conv_stem", format!("input {h}x{w} is not divisible by 4")));
        }
        let mut x = images;
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            x = rec.conv(conv, x)?;
            x = rec.batchnorm(norm, x)?;
            if i + 1 < self.convs.len() {
                x = rec.activation(x, Activation::Relu)?;
            }
        }
        Ok(x)
    }
}

/// Stride-2 convolution to the next stage's width, then batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Downsample {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

impl Downsample {
    pub fn record<T: Element>(&self, rec: &mut Recorder<'_, T>, x: NodeId) -> Result<NodeId> {
        let [_, _, h, w] = rec.tape.value(x).dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::geometry("downsample", format!("input {h}x{w} has odd spatial size")));
        }
        let y = rec.conv(&self.conv, x)?;
        rec.batchnorm(&self.norm, y)
    }
}

/// `Y = DropPath(MCA(BN(X))) + X`, `Z = DropPath(GELU(BN(Y) W1) W2) + Y`,
/// with the MLP applied at every spatial position.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: BatchNorm2d,
    pub mca: Mca,
    pub norm2: BatchNorm2d,
    pub fc1: Linear,
    pub fc2: Linear,
    pub drop_rate: f64,
}

impl Block {
    pub fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        spec: StageSpec,
        cfg: &ModelConfig,
        drop_rate: f64,
    ) -> Result<Block> {
        let c = spec.channels;
        Ok(Block {
            norm1: b.batchnorm("norm1", c, cfg.norm)?,
            mca: b.scoped("mca", |b| Mca::build(b, c, &cfg.mca, cfg.norm))?,
            norm2: b.batchnorm("norm2", c, cfg.norm)?,
            fc1: b.linear("mlp.fc1", c, c * spec.mlp_ratio, true)?,
            fc2: b.linear("mlp.fc2", c * spec.mlp_ratio, c, true)?,
            drop_rate,
        })
    }

    pub fn record<T: Element>(&self, rec: &mut Recorder<'_, T>, x: NodeId) -> Result<NodeId> {
        let c = rec.tape.value(x).dims()[1];
        if c != self.mca.channels {
            return Err(Error::shape(
                "convformer_block",
                format!("input has {c} channels, block expects {}", self.mca.channels),
            ));
        }
        let u = rec.batchnorm(&self.norm1, x)?;
        let a = self.mca.record(rec, u)?;
        let a = rec.drop_path(a, self.drop_rate)?;
        let y = rec.tape.add(a, x)?;

        let u = rec.batchnorm(&self.norm2, y)?;
        let h = rec.linear(&self.fc1, u)?;
        let h = rec.activation(h, Activation::Gelu)?;
        let m = rec.linear(&self.fc2, h)?;
        let m = rec.drop_path(m, self.drop_rate)?;
        rec.tape.add(m, y)
    }

    pub fn param_count(&self) -> u64 {
        self.norm1.param_count()
            + self.mca.param_count()
            + self.norm2.param_count()
            + self.fc1.param_count()
            + self.fc2.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub spec: StageSpec,
    pub downsample: Option<Downsample>,
    pub blocks: Vec<Block>,
}

/// Final batch norm, global average pool, linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub norm: BatchNorm2d,
    pub fc: Linear,
}

/// Layer structure of a model; parameter values live in a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub config: ModelConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub head: Head,
}

impl Architecture {
    /// Registers every parameter in stable order: stem, then each stage
    /// (downsample first, then blocks), then the head.
    pub fn build<T: Element>(config: &ModelConfig, b: &mut ParamBuilder<'_, T>) -> Result<Architecture> {
        config.validate()?;
        let stem = b.scoped("stem", |b| Stem::build(b, config.stem_channels(), config.stem_bias, config.norm))?;
        let rates = config.block_drop_rates();
        let mut next_block = 0;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut prev = config.stem_channels();
        for (si, spec) in config.stages.iter().enumerate() {
            let stage = b.scoped(format!("stages.{si}"), |b| {
                let downsample = if si > 0 {
                    let k = config.downsample_kernel;
                    Some(b.scoped("downsample", |b| {
                        Ok(Downsample {
                            conv: b.conv(
                                "conv",
                                prev,
                                spec.channels,
                                k,
                                ConvGeometry::strided(2, (k - 1) / 2),
                                true,
                            )?,
                            norm: b.batchnorm("norm", spec.channels, config.norm)?,
                        })
                    })?)
                } else {
                    None
                };
                let blocks = (0..spec.blocks)
                    .map(|bi| {
                        let rate = rates[next_block + bi];
                        b.scoped(format!("blocks.{bi}"), |b| Block::build(b, *spec, config, rate))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Stage { spec: *spec, downsample, blocks })
            })?;
            next_block += spec.blocks;
            prev = spec.channels;
            stages.push(stage);
        }
        let head = b.scoped("head", |b| {
            Ok(Head {
                norm: b.batchnorm("norm", prev, config.norm)?,
                fc: b.linear("fc", prev, config.num_classes, true)?,
            })
        })?;
        Ok(Architecture { config: config.clone(), stem, stages, head })
    }

    pub fn record<T: Element>(&self, rec: &mut Recorder<'_, T>, images: NodeId) -> Result<Trace> {
        let [_, _, h, w] = rec.tape.value(images).dims();
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::geometry("model_forward", format!("input {h}x{w} is not divisible by 32")));
        }
        let stem = self.stem.record(rec, images)?;
        let mut x = stem;
        let mut stage_inputs = Vec::with_capacity(self.stages.len());
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                x = ds.record(rec, x)?;
            }
            stage_inputs.push(x);
            for block in &stage.blocks {
                x = block.record(rec, x)?;
            }
            stage_outputs.push(x);
        }
        let head_input = x;
        let y = rec.batchnorm(&self.head.norm, x)?;
        let y = rec.tape.global_avg_pool(y)?;
        let logits = rec.linear(&self.head.fc, y)?;
        Ok(Trace { stem, stage_inputs, stage_outputs, head_input, logits })
    }
}

/// Named checkpoints of one forward recording.
#[derive(Debug, Clone)]
pub struct Trace {
    pub stem: NodeId,
    /// After each stage's downsample (the stem output for stage 1).
    pub stage_inputs: Vec<NodeId>,
    pub stage_outputs: Vec<NodeId>,
    pub head_input: NodeId,
    /// `(N, num_classes, 1, 1)`.
    pub logits: NodeId,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub arch: Architecture,
    pub params: ParamSet<T>,
}

/// Builds and initializes a model; deterministic for a given rng state.
pub fn build_model<T: Element>(config: &ModelConfig, rng: &mut Rng) -> Result<Model<T>> {
    Model::build(config, rng)
}

impl<T: Element> Model<T> {
    pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let arch = Architecture::build(config, &mut ParamBuilder::new(&mut params, Some(rng)))?;
        Ok(Model { arch, params })
    }

    /// Zero-initialized model: same structure and parameter layout, no
    /// random draws. Suitable for counting and for loading checkpoints.
    pub fn skeleton(config: &ModelConfig) -> Result<Self> {
        let mut params = ParamSet::new();
        let arch = Architecture::build(config, &mut ParamBuilder::new(&mut params, None))?;
        Ok(Model { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn param_count(&self) -> usize {
        self.params.learnable_count()
    }

    /// Records a forward pass over `images` onto `tape`. The caller decides
    /// whether to apply the returned running-statistics updates.
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        images: NodeId,
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<(Trace, Recording<T>)> {
        let mut rec = Recorder::new(tape, &self.params, mode, rng);
        let trace = self.arch.record(&mut rec, images)?;
        Ok((trace, rec.finish()))
    }

    /// Eval-mode logits `(N, num_classes, 1, 1)`.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.leaf(images.clone());
        let (trace, _) = self.record(&mut tape, input, Mode::Eval, None)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Train-mode logits; updates running statistics and draws drop-path
    /// masks from `rng`.
    pub fn forward_train(&mut self, images: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.leaf(images.clone());
        let (trace, recording) = self.record(&mut tape, input, Mode::Train, Some(rng))?;
        self.params.apply_stat_updates(&recording.updates);
        Ok(tape.value(trace.logits).clone())
    }

    /// Eval-mode stem output `(N, C_1, H/4, W/4)`.
    pub fn conv_stem(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.leaf(images.clone());
        let mut rec = Recorder::new(&mut tape, &self.params, Mode::Eval, None);
        let out = self.arch.stem.record(&mut rec, input)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode downsample into stage `stage` (1, 2 or 3).
    pub fn downsample(&self, stage: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let ds = self
            .arch
            .stages
            .get(stage)
            .and_then(|s| s.downsample.as_ref())
            .ok_or_else(|| Error::Config(format!("stage {stage} has no downsample")))?;
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let mut rec = Recorder::new(&mut tape, &self.params, Mode::Eval, None);
        let out = ds.record(&mut rec, input)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode forward returning the spatial size of the stem output and
    /// of each stage output.
    pub fn stage_sizes(&self, images: &Tensor<T>) -> Result<Vec<[usize; 4]>> {
        let mut tape = Tape::new();
        let input = tape.leaf(images.clone());
        let (trace, _) = self.record(&mut tape, input, Mode::Eval, None)?;
        Ok(trace.stage_outputs.iter().map(|&id| tape.value(id).dims()).collect())
    }
}

/// A single ConvFormer block owning its parameters.
#[derive(Debug, Clone)]
pub struct ConvFormerBlock<T> {
    pub layer: Block,
    pub params: ParamSet<T>,
}

impl<T: Element> ConvFormerBlock<T> {
    pub fn new(spec: StageSpec, config: &ModelConfig, drop_rate: f64, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let layer = Block::build(&mut ParamBuilder::new(&mut params, Some(rng)), spec, config, drop_rate)?;
        Ok(ConvFormerBlock { layer, params })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let mut rec = Recorder::new(&mut tape, &self.params, mode, rng);
        let out = self.layer.record(&mut rec, input)?;
        let recording = rec.finish();
        self.params.apply_stat_updates(&recording.updates);
        Ok(tape.value(out).clone())
    }
}
