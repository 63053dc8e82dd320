//! Structural parameter and multiply-accumulate counting.
//!
//! Conventions: a convolution costs `C_out * (C_in / groups) * K^2 * H_out * W_out`
//! MACs per image, a linear layer `in * out` per position it is applied at.
//! Batch norm, activations, pooling and elementwise operations cost zero.
//! Parameters are learnable scalars only; running statistics are excluded.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Linear};
use crate::mca::Mca;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Element;

pub const CONVENTION: &str =
    "MACs per image: conv = C_out*(C_in/groups)*K^2*H_out*W_out, linear = in*out per position; \
batch norm, activations, pooling and elementwise ops count 0; params exclude running statistics";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub path: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_params: u64,
    pub total_macs: u64,
    /// `(height, width)` the MACs refer to; `None` for a params-only report.
    pub input: Option<(usize, usize)>,
    /// One entry per layer, in parameter order.
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    fn from_entries(entries: Vec<CostEntry>, input: Option<(usize, usize)>) -> Self {
        CostReport {
            total_params: entries.iter().map(|e| e.params).sum(),
            total_macs: entries.iter().map(|e| e.macs).sum(),
            input,
            entries,
        }
    }

    /// Sums entries by module: the stem, each downsample, each block and
    /// the head. Totals are unchanged.
    pub fn by_module(&self) -> Vec<CostEntry> {
        let mut out: Vec<CostEntry> = Vec::new();
        for e in &self.entries {
            let module = module_of(&e.path);
            match out.last_mut() {
                Some(last) if last.path == module => {
                    last.params += e.params;
                    last.macs += e.macs;
                }
                _ => out.push(CostEntry { path: module.to_string(), params: e.params, macs: e.macs }),
            }
        }
        out
    }
}

fn module_of(path: &str) -> &str {
    let depth = match path.split('.').nth(2) {
        Some("blocks") if path.starts_with("stages.") => 4,
        Some(_) if path.starts_with("stages.") => 3,
        _ => 1,
    };
    match path.match_indices('.').nth(depth - 1) {
        Some((i, _)) => &path[..i],
        None => path,
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {CONVENTION}")?;
        match self.input {
            Some((h, w)) => writeln!(f, "# input 1x3x{h}x{w}")?,
            None => writeln!(f, "# params only")?,
        }
        let rows = self.by_module();
        let width = rows.iter().map(|r| r.path.len()).max().unwrap_or(0).max(6);
        writeln!(f, "{:<width$}  {:>14}  {:>16}", "module", "params", "macs")?;
        for r in &rows {
            writeln!(f, "{:<width$}  {:>14}  {:>16}", r.path, r.params, r.macs)?;
        }
        writeln!(f, "{:<width$}  {:>14}  {:>16}", "total", self.total_params, self.total_macs)
    }
}

struct Counter<'a, T> {
    params: &'a ParamSet<T>,
    entries: Vec<CostEntry>,
}

impl<T: Element> Counter<'_, T> {
    fn push(&mut self, id: ParamId, leaf: &str, params: u64, macs: u64) {
        let name = &self.params.get(id).name;
        let path = name.strip_suffix(leaf).and_then(|p| p.strip_suffix('.')).unwrap_or(name);
        self.entries.push(CostEntry { path: path.to_string(), params, macs });
    }

    fn conv(&mut self, layer: &Conv2d, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        let (ho, wo) = layer.output_hw(h, w)?;
        self.push(layer.weight, "weight", layer.param_count(), layer.macs(ho, wo));
        Ok((ho, wo))
    }

    fn norm(&mut self, layer: &BatchNorm2d) {
        self.push(layer.gamma, "gamma", layer.param_count(), 0);
    }

    fn linear(&mut self, layer: &Linear, positions: usize) {
        self.push(layer.weight, "weight", layer.param_count(), layer.macs(positions));
    }

    fn mca(&mut self, mca: &Mca, hw: (usize, usize)) -> Result<()> {
        let inner = self.conv(&mca.expand, hw)?;
        for b in &mca.branches {
            self.conv(b, inner)?;
        }
        self.norm(&mca.branch_norm);
        self.conv(&mca.reduce, inner)?;
        self.conv(&mca.out, hw)?;
        if let Some(p) = &mca.proj {
            self.conv(p, hw)?;
        }
        if let Some(g) = &mca.gate {
            self.linear(&g.fc1, 1);
            self.linear(&g.fc2, 1);
        }
        Ok(())
    }
}

/// Learnable parameter count with a per-layer breakdown.
pub fn count_params<T: Element>(model: &Model<T>) -> CostReport {
    let mut report = count(model, None).expect("params-only counting has no geometry");
    for e in &mut report.entries {
        e.macs = 0;
    }
    report.total_macs = 0;
    report
}

/// Parameters and MACs for one `(height, width)` image.
pub fn count_flops<T: Element>(model: &Model<T>, input: (usize, usize)) -> Result<CostReport> {
    count(model, Some(input))
}

/// Same as [`count_flops`] without materializing initialized weights.
pub fn count_config(config: &ModelConfig, input: Option<(usize, usize)>) -> Result<CostReport> {
    let model = Model::<f32>::skeleton(config)?;
    match input {
        Some(hw) => count_flops(&model, hw),
        None => Ok(count_params(&model)),
    }
}

fn count<T: Element>(model: &Model<T>, input: Option<(usize, usize)>) -> Result<CostReport> {
    let (h, w) = input.unwrap_or((224, 224));
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::geometry("count_flops", format!("input {h}x{w} is not divisible by 32")));
    }
    let arch = &model.arch;
    let mut c = Counter { params: &model.params, entries: Vec::new() };
    let mut hw = (h, w);
    for (conv, norm) in arch.stem.convs.iter().zip(&arch.stem.norms) {
        hw = c.conv(conv, hw)?;
        c.norm(norm);
    }
    for stage in &arch.stages {
        if let Some(ds) = &stage.downsample {
            hw = c.conv(&ds.conv, hw)?;
            c.norm(&ds.norm);
        }
        for block in &stage.blocks {
            c.norm(&block.norm1);
            c.mca(&block.mca, hw)?;
            c.norm(&block.norm2);
            c.linear(&block.fc1, hw.0 * hw.1);
            c.linear(&block.fc2, hw.0 * hw.1);
        }
    }
    c.norm(&arch.head.norm);
    c.linear(&arch.head.fc, 1);
    Ok(CostReport::from_entries(c.entries, input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamBuilder;
    use crate::nnops::ConvGeometry;
    use crate::rng::Rng;

    #[test]
    fn pointwise_conv_macs() {
        let mut set: ParamSet<f32> = ParamSet::new();
        let conv = ParamBuilder::new(&mut set, None).conv("c", 64, 256, 1, ConvGeometry::default(), true).unwrap();
        assert_eq!(conv.macs(56, 56), 51_380_224);
    }

    #[test]
    fn linear_params() {
        let mut set: ParamSet<f32> = ParamSet::new();
        let fc = ParamBuilder::new(&mut set, None).linear("fc", 64, 1000, true).unwrap();
        assert_eq!(fc.param_count(), 65_000);
        assert_eq!(set.learnable_count(), 65_000);
    }

    #[test]
    fn totals_match_breakdown_and_model() {
        let m: Model<f32> = Model::build(&ModelConfig::tiny(), &mut Rng::seed(0)).unwrap();
        let r = count_flops(&m, (64, 64)).unwrap();
        assert_eq!(r.total_params as usize, m.param_count());
        assert_eq!(r.entries.iter().map(|e| e.params).sum::<u64>(), r.total_params);
        assert_eq!(r.entries.iter().map(|e| e.macs).sum::<u64>(), r.total_macs);
        let grouped = r.by_module();
        assert_eq!(grouped.iter().map(|e| e.macs).sum::<u64>(), r.total_macs);
        assert_eq!(grouped[0].path, "stem");
        assert_eq!(grouped.last().unwrap().path, "head");
        assert!(grouped.iter().any(|e| e.path == "stages.2.blocks.1"));
        assert!(grouped.iter().any(|e| e.path == "stages.3.downsample"));
    }

    #[test]
    fn macs_scale_with_area() {
        let cfg = ModelConfig::tiny();
        let a = count_config(&cfg, Some((32, 32))).unwrap();
        let b = count_config(&cfg, Some((64, 64))).unwrap();
        // Only the gate and head are resolution independent.
        assert!(b.total_macs > 3 * a.total_macs && b.total_macs <= 4 * a.total_macs);
        assert_eq!(a.total_params, b.total_params);
    }

    #[test]
    fn bad_geometry() {
        assert!(matches!(count_config(&ModelConfig::tiny(), Some((48, 64))), Err(Error::Geometry { .. })));
    }

    #[test]
    fn text_report_has_convention_header() {
        let r = count_config(&ModelConfig::tiny(), Some((32, 32))).unwrap();
        let text = r.to_string();
        assert!(text.starts_with("# MACs per image"));
        assert!(text.lines().last().unwrap().starts_with("total"));
    }
}
