use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mca::McaConfig;
use crate::nnops::NormConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    /// Hidden width multiplier of the MLP sub-block.
    pub mlp_ratio: usize,
}

impl StageSpec {
    pub const fn new(channels: usize, blocks: usize, mlp_ratio: usize) -> Self {
        StageSpec { channels, blocks, mlp_ratio }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    /// Largest drop-path rate; block `i` of `L` uses `rate * i / (L - 1)`.
    pub drop_path_rate: f64,
    /// Bias on the three stem convolutions.
    pub stem_bias: bool,
    /// Kernel of the stride-2 inter-stage downsample, padded by
    /// `(k - 1) / 2`. The default 2 makes it non-overlapping.
    pub downsample_kernel: usize,
    pub norm: NormConfig,
    pub mca: McaConfig,
}

const WIDTHS: [usize; 4] = [64, 128, 320, 512];
const MLP_RATIOS: [usize; 4] = [8, 8, 4, 4];

impl ModelConfig {
    fn standard(blocks: [usize; 4]) -> Self {
        ModelConfig {
            stages: (0..4).map(|i| StageSpec::new(WIDTHS[i], blocks[i], MLP_RATIOS[i])).collect(),
            num_classes: 1000,
            drop_path_rate: 0.0,
            stem_bias: true,
            downsample_kernel: 2,
            norm: NormConfig::default(),
            mca: McaConfig::default(),
        }
    }

    /// Widths 64/128/320/512, blocks 2/2/6/2.
    pub fn convformer_s() -> Self {
        Self::standard([2, 2, 6, 2])
    }

    /// Widths 64/128/320/512, blocks 3/3/12/3.
    pub fn convformer_l() -> Self {
        Self::standard([3, 3, 12, 3])
    }

    /// Desk-scale variant for tests and toy training: widths 8/16/32/64,
    /// blocks 1/1/2/1, ten classes.
    pub fn tiny() -> Self {
        ModelConfig {
            stages: [8, 16, 32, 64]
                .iter()
                .zip([1, 1, 2, 1])
                .zip(MLP_RATIOS)
                .map(|((&c, l), r)| StageSpec::new(c, l, r))
                .collect(),
            num_classes: 10,
            ..Self::standard([1, 1, 1, 1])
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "convformer-s" => Some(Self::convformer_s()),
            "convformer-l" => Some(Self::convformer_l()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Applies an ablation to a copy of this config, including the block
    /// count change used to keep complexity comparable.
    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        let mut cfg = self.clone();
        match ablation {
            Ablation::NoExpand => {
                cfg.mca.use_expand = false;
                cfg.stages[2].blocks = 12;
            }
            Ablation::NoParallel => cfg.mca.use_parallel = false,
            Ablation::NoResidual => cfg.mca.use_inner_residual = false,
            Ablation::NoGating => {
                cfg.mca.use_gating = false;
                cfg.stages[2].blocks = 7;
            }
        }
        cfg
    }

    pub fn stem_channels(&self) -> usize {
        self.stages[0].channels
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// Drop-path rate per block, ramped linearly from 0 to
    /// `drop_path_rate` over the whole network.
    pub fn block_drop_rates(&self) -> Vec<f64> {
        let total = self.total_blocks();
        (0..total)
            .map(|i| if total > 1 { self.drop_path_rate * (i as f64 / (total - 1) as f64) } else { 0.0 })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::Config(format!("expected 4 stages, got {}", self.stages.len())));
        }
        if let Some(s) = self.stages.iter().find(|s| s.channels == 0 || s.blocks == 0 || s.mlp_ratio == 0) {
            return Err(Error::Config(format!("stage fields must be positive: {s:?}")));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate)));
        }
        if self.downsample_kernel < 2 {
            return Err(Error::Config(format!("downsample_kernel {} must be at least 2", self.downsample_kernel)));
        }
        if !(self.norm.epsilon > 0.0) || !(0.0 < self.norm.momentum && self.norm.momentum < 1.0) {
            return Err(Error::Config(format!("invalid norm settings {:?}", self.norm)));
        }
        for s in &self.stages {
            self.mca.validate(s.channels)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    NoExpand,
    NoParallel,
    NoResidual,
    NoGating,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoExpand, Ablation::NoParallel, Ablation::NoResidual, Ablation::NoGating];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoExpand => "no-expand",
            Ablation::NoParallel => "no-parallel",
            Ablation::NoResidual => "no-residual",
            Ablation::NoGating => "no-gating",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}
