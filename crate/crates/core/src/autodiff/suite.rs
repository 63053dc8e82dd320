//! Randomized gradient-check suites, grouped into the scopes the command
//! line exposes. Every check runs in 64-bit against central differences.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{ConvFormerBlock, Model, ModelConfig, StageSpec};
use crate::error::{Error, Result};
use crate::layers::Recorder;
use crate::mca::{McaBlock, McaConfig};
use crate::nnops::{Activation, ConvGeometry, Mode, NormConfig};
use crate::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Init, Tensor64};

use super::{grad_check, grad_check_refined, GradCheckReport, NodeId, Tape, DEFAULT_STEP};

/// Pass threshold on the worst relative error.
pub const THRESHOLD: f64 = 1e-4;
/// Random instances per operator in the `ops` scope.
pub const OP_INSTANCES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Mca,
    Block,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Ops, Scope::Mca, Scope::Block, Scope::Model];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Mca => "mca",
            Scope::Block => "block",
            Scope::Model => "model",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope {s:?}")))
    }
}

/// Outcome of one named check, aggregated over its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// `(instance, input, coordinate, analytic, numeric)` at the worst point.
    pub worst: Option<(usize, usize, usize, f64, f64)>,
    /// Name of the input at the worst point: `x` for the data input,
    /// `x1`, `x2`, ... for further operands, else a parameter name.
    pub worst_input: Option<String>,
}

impl SuiteRow {
    fn new(name: impl Into<String>) -> Self {
        SuiteRow { name: name.into(), instances: 0, coordinates: 0, max_rel_error: 0.0, worst: None, worst_input: None }
    }

    fn absorb(&mut self, report: &GradCheckReport, label: impl Fn(usize) -> String) {
        let instance = self.instances;
        self.instances += 1;
        for input in &report.inputs {
            self.coordinates += input.checked;
            if input.max_rel_error >= self.max_rel_error {
                self.max_rel_error = input.max_rel_error;
                self.worst = input.worst.map(|(c, a, n)| (instance, input.index, c, a, n));
                self.worst_input = Some(label(input.index));
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD
    }
}

pub fn run(scope: Scope, seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rng = Rng::seed(seed);
    match scope {
        Scope::Ops => ops(&mut rng),
        Scope::Mca => mca(&mut rng),
        Scope::Block => block(&mut rng),
        Scope::Model => model(&mut rng),
    }
}

fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut Rng) -> Tensor64 {
    Tensor64::create(shape, Init::Uniform { rng, lo, hi }).expect("small shape")
}

/// Uniform values with magnitude in `[0.05, 1)`, keeping finite
/// differences away from the kink of ReLU.
fn off_zero(shape: [usize; 4], rng: &mut Rng) -> Tensor64 {
    uniform(shape, -1.0, 1.0, rng).map(|v| v.signum() * (0.05 + 0.95 * v.abs()))
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate
/// contributes with its own weight.
fn project(tape: &mut Tape<f64>, y: NodeId, r: &Tensor64) -> Result<NodeId> {
    let r = tape.leaf(r.clone());
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn small_dims(rng: &mut Rng) -> [usize; 4] {
    [1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4)]
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;

struct OpCase {
    inputs: Vec<Tensor64>,
    weights: Tensor64,
    f: OpFn,
}

fn check_op(row: &mut SuiteRow, case: OpCase, seed: u64) -> Result<()> {
    let OpCase { inputs, weights, f } = case;
    let report = grad_check(
        |tape, ids| {
            let y = f(tape, ids)?;
            if tape.value(y).len() == 1 {
                Ok(y)
            } else {
                project(tape, y, &weights)
            }
        },
        &inputs,
        DEFAULT_STEP,
        seed,
    )?;
    row.absorb(&report, |i| if i == 0 { "x".into() } else { format!("x{i}") });
    Ok(())
}

fn random_conv(rng: &mut Rng) -> (Tensor64, Tensor64, Tensor64, ConvGeometry) {
    let groups = 1 + rng.below(3);
    let cpg = 1 + rng.below(2);
    let opg = 1 + rng.below(2);
    let kernel = 1 + rng.below(3);
    let g = ConvGeometry { stride: 1 + rng.below(2), padding: rng.below(2), dilation: 1 + rng.below(2), groups };
    let span = g.dilation * (kernel - 1) + 1;
    let h = span.saturating_sub(2 * g.padding).max(1) + rng.below(3);
    let w = span.saturating_sub(2 * g.padding).max(1) + rng.below(3);
    let x = uniform([1 + rng.below(2), groups * cpg, h, w], -1.0, 1.0, rng);
    let weight = uniform([groups * opg, cpg, kernel, kernel], -1.0, 1.0, rng);
    let bias = uniform([1, groups * opg, 1, 1], -1.0, 1.0, rng);
    (x, weight, bias, g)
}

type CaseMaker = fn(&mut Rng) -> Result<OpCase>;

fn op_cases() -> Vec<(&'static str, CaseMaker)> {
    vec![
        ("add", |rng| {
            let d = small_dims(rng);
            Ok(OpCase {
                inputs: vec![uniform(d, -1.0, 1.0, rng), uniform(d, -1.0, 1.0, rng)],
                weights: uniform(d, -1.0, 1.0, rng),
                f: Box::new(|t, x| t.add(x[0], x[1])),
            })
        }),
        ("sub", |rng| {
            let d = small_dims(rng);
            Ok(OpCase {
                inputs: vec![uniform(d, -1.0, 1.0, rng), uniform(d, -1.0, 1.0, rng)],
                weights: uniform(d, -1.0, 1.0, rng),
                f: Box::new(|t, x| t.sub(x[0], x[1])),
            })
        }),
        ("mul", |rng| {
            let d = small_dims(rng);
            Ok(OpCase {
                inputs: vec![uniform(d, -1.0, 1.0, rng), uniform(d, -1.0, 1.0, rng)],
                weights: uniform(d, -1.0, 1.0, rng),
                f: Box::new(|t, x| t.mul(x[0], x[1])),
            })
        }),
        ("scale", |rng| {
            let d = small_dims(rng);
            let k = rng.uniform(-2.0, 2.0);
            Ok(OpCase {
                inputs: vec![uniform(d, -1.0, 1.0, rng)],
                weights: uniform(d, -1.0, 1.0, rng),
                f: Box::new(move |t, x| t.scale(x[0], k)),
            })
        }),
        ("mul_channelwise", |rng| {
            let d = small_dims(rng);
            Ok(OpCase {
                inputs: vec![uniform(d, -1.0, 1.0, rng), uniform([d[0], d[1], 1, 1], -1.0, 1.0, rng)],
                weights: uniform(d, -1.0, 1.0, rng),
                f: Box::new(|t, x| t.mul_channelwise(x[0], x[1])),
            })
        }),
        ("conv2d", |rng| {
            let (x, w, b, g) = random_conv(rng);
            let y = crate::nnops::conv2d_forward(&x, &w, Some(&b), g)?;
            Ok(OpCase {
                weights: uniform(y.dims(), -1.0, 1.0, rng),
                inputs: vec![x, w, b],
                f: Box::new(move |t, x| t.conv2d(x[0], x[1], Some(x[2]), g)),
            })
        }),
        ("conv2d_mse", |rng| {
            // mean((conv(x) - t)^2) for a 3x3 kernel
            let g = ConvGeometry::strided(1, 1);
            let x = uniform([1, 2, 4, 4], -1.0, 1.0, rng);
            let w = uniform([2, 2, 3, 3], -1.0, 1.0, rng);
            let target = uniform([1, 2, 4, 4], -1.0, 1.0, rng);
            Ok(OpCase {
                inputs: vec![x, w],
                weights: Tensor64::scalar(1.0),
                f: Box::new(move |t, x| {
                    let y = t.conv2d(x[0], x[1], None, g)?;
                    let target = t.leaf(target.clone());
                    let e = t.sub(y, target)?;
                    let sq = t.mul(e, e)?;
                    t.mean(sq)
                }),
            })
        }),
        ("batchnorm_eval", |rng| {
            let d = small_dims(rng);
            let c = d[1];
            let mean = uniform([1, c, 1, 1], -0.5, 0.5, rng);
            let var = uniform([1, c, 1, 1], 0.5, 1.5, rng);
            Ok(OpCase {
                inputs: vec![
                    uniform(d, -1.0, 1.0, rng),
                    uniform([1, c, 1, 1], 0.5, 1.5, rng),
                    uniform([1, c, 1, 1], -1.0, 1.0, rng),
                ],
                weights: uniform(d, -1.0, 1.0, rng),
                f: Box::new(move |t, x| {
                    Ok(t.batchnorm(x[0], x[1], x[2], (&mean, &var), NormConfig::default(), Mode::Eval)?.0)
                }),
            })
        }),
        ("batchnorm_train", |rng| {
            // At least two values per channel so the batch variance is not zero.
            let mut d = small_dims(rng);
            d[0] = 2;
            let c = d[1];
            let mean = Tensor64::zeros([1, c, 1, 1]);
            let var = Tensor64::full([1, c, 1, 1], 1.0);
            Ok(OpCase {
                inputs: vec![
                    uniform(d, -1.0, 1.0, rng),
                    uniform([1, c, 1, 1], 0.5, 1.5, rng),
                    uniform([1, c, 1, 1], -1.0, 1.0, rng),
                ],
                weights: uniform(d, -1.0, 1.0, rng),
                f: Box::new(move |t, x| {
                    Ok(t.batchnorm(x[0], x[1], x[2], (&mean, &var), NormConfig::default(), Mode::Train)?.0)
                }),
            })
        }),
        ("relu", |rng| {
            let d = small_dims(rng);
            Ok(OpCase {
                inputs: vec![off_zero(d, rng)],
                weights: uniform(d, -1.0, 1.0, rng),
                f: Box::new(|t, x| t.activation(x[0], Activation::Relu)),
            })
        }),
        ("gelu", |rng| {
            let d = small_dims(rng);
            Ok(OpCase {
                inputs: vec![uniform(d, -3.0, 3.0, rng)],
                weights: uniform(d, -1.0, 1.0, rng),
                f: Box::new(|t, x| t.activation(x[0], Activation::Gelu)),
            })
        }),
        ("sigmoid", |rng| {
            let d = small_dims(rng);
            Ok(OpCase {
                inputs: vec![uniform(d, -4.0, 4.0, rng)],
                weights: uniform(d, -1.0, 1.0, rng),
                f: Box::new(|t, x| t.activation(x[0], Activation::Sigmoid)),
            })
        }),
        ("global_avg_pool", |rng| {
            let d = small_dims(rng);
            Ok(OpCase {
                inputs: vec![uniform(d, -1.0, 1.0, rng)],
                weights: uniform([d[0], d[1], 1, 1], -1.0, 1.0, rng),
                f: Box::new(|t, x| t.global_avg_pool(x[0])),
            })
        }),
        ("linear", |rng| {
            let d = small_dims(rng);
            let out = 1 + rng.below(4);
            Ok(OpCase {
                inputs: vec![
                    uniform(d, -1.0, 1.0, rng),
                    uniform([d[1], out, 1, 1], -1.0, 1.0, rng),
                    uniform([1, out, 1, 1], -1.0, 1.0, rng),
                ],
                weights: uniform([d[0], out, d[2], d[3]], -1.0, 1.0, rng),
                f: Box::new(|t, x| t.linear(x[0], x[1], Some(x[2]))),
            })
        }),
        ("drop_path", |rng| {
            let mut d = small_dims(rng);
            d[0] = 4;
            let mask: Vec<f64> = (0..4).map(|_| if rng.bernoulli(0.5) { 2.0 } else { 0.0 }).collect();
            Ok(OpCase {
                inputs: vec![uniform(d, -1.0, 1.0, rng)],
                weights: uniform(d, -1.0, 1.0, rng),
                f: Box::new(move |t, x| t.sample_scale(x[0], mask.clone())),
            })
        }),
        ("sum", |rng| {
            let d = small_dims(rng);
            Ok(OpCase {
                inputs: vec![uniform(d, -1.0, 1.0, rng)],
                weights: Tensor64::scalar(1.0),
                f: Box::new(|t, x| t.sum(x[0])),
            })
        }),
        ("mean", |rng| {
            let d = small_dims(rng);
            Ok(OpCase {
                inputs: vec![uniform(d, -1.0, 1.0, rng)],
                weights: Tensor64::scalar(1.0),
                f: Box::new(|t, x| t.mean(x[0])),
            })
        }),
        ("cross_entropy", |rng| {
            let n = 1 + rng.below(3);
            let k = 2 + rng.below(4);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            Ok(OpCase {
                inputs: vec![uniform([n, k, 1, 1], -3.0, 3.0, rng)],
                weights: Tensor64::scalar(1.0),
                f: Box::new(move |t, x| t.cross_entropy(x[0], &labels)),
            })
        }),
    ]
}

fn ops(rng: &mut Rng) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for (name, make) in op_cases() {
        let mut row = SuiteRow::new(name);
        for _ in 0..OP_INSTANCES {
            let case = make(rng)?;
            check_op(&mut row, case, rng.next_u64())?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Redraws every parameter so no term of the forward pass is trivially
/// zero or vanishingly small: weights uniform in `+-1/sqrt(fan_in)`, biases
/// and shifts in `+-0.5`, scales and variances in `[0.5, 1.5]`.
pub fn randomize_params(params: &mut ParamSet<f64>, rng: &mut Rng) {
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let name = params.get(id).name.clone();
        let v = params.value_mut(id);
        let (lo, hi) = if name.ends_with("running_var") || name.ends_with("gamma") {
            (0.5, 1.5)
        } else if name.ends_with("weight") {
            let [a, b, c, d] = v.dims();
            // Linear weights are stored `(in, out, 1, 1)`, convolutions `(out, in / groups, k, k)`.
            let fan_in = if name.contains("fc") { a } else { b * c * d };
            let s = 1.0 / (fan_in as f64).sqrt();
            (-s, s)
        } else {
            (-0.5, 0.5)
        };
        v.data_mut().iter_mut().for_each(|x| *x = rng.uniform(lo, hi));
    }
}

/// Checks `sum(forward(x) * r)` with respect to the input and every
/// learnable tensor. `forward` records onto the tape with the given
/// parameter nodes pre-bound.
fn check_params<F>(
    row: &mut SuiteRow,
    params: &ParamSet<f64>,
    x: Tensor64,
    out_dims: [usize; 4],
    rng: &mut Rng,
    forward: F,
) -> Result<()>
where
    F: Fn(&mut Recorder<'_, f64>, NodeId) -> Result<NodeId>,
{
    let ids: Vec<ParamId> = params.learnable_ids().collect();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| params.value(id).clone()));
    let weights = uniform(out_dims, -1.0, 1.0, rng);
    let report = grad_check_refined(
        |tape, nodes| {
            let mut rec = Recorder::new(tape, params, Mode::Eval, None);
            for (&id, &node) in ids.iter().zip(&nodes[1..]) {
                rec.bind(id, node);
            }
            let y = forward(&mut rec, nodes[0])?;
            project(tape, y, &weights)
        },
        &inputs,
        THRESHOLD,
        rng.next_u64(),
    )?;
    row.absorb(&report, |i| if i == 0 { "x".into() } else { params.get(ids[i - 1]).name.clone() });
    Ok(())
}

/// One MCA variant per ablation toggle, plus the default, in eval mode.
fn mca(rng: &mut Rng) -> Result<Vec<SuiteRow>> {
    let base = McaConfig::default();
    let variants = [
        ("mca", base.clone()),
        ("mca/no-expand", McaConfig { use_expand: false, ..base.clone() }),
        ("mca/no-parallel", McaConfig { use_parallel: false, ..base.clone() }),
        ("mca/no-residual", McaConfig { use_inner_residual: false, ..base.clone() }),
        ("mca/no-gating", McaConfig { use_gating: false, ..base.clone() }),
        ("mca/no-proj", McaConfig { use_output_proj: false, ..base.clone() }),
    ];
    let mut rows = Vec::new();
    for (name, cfg) in variants {
        let mut row = SuiteRow::new(name);
        let mut block = McaBlock::<f64>::new(4, &cfg, NormConfig::default(), rng)?;
        randomize_params(&mut block.params, rng);
        let x = uniform([1, 4, 8, 8], -1.0, 1.0, rng);
        let layer = block.layer.clone();
        check_params(&mut row, &block.params, x, [1, 4, 8, 8], rng, |rec, x| layer.record(rec, x))?;
        rows.push(row);
    }
    Ok(rows)
}

fn block(rng: &mut Rng) -> Result<Vec<SuiteRow>> {
    let cfg = ModelConfig::tiny();
    let mut rows = Vec::new();
    for (name, spec) in
        [("convformer_block", StageSpec::new(8, 1, 4)), ("convformer_block/wide", StageSpec::new(16, 1, 2))]
    {
        let mut row = SuiteRow::new(name);
        let mut b = ConvFormerBlock::<f64>::new(spec, &cfg, 0.0, rng)?;
        randomize_params(&mut b.params, rng);
        let x = uniform([1, spec.channels, 6, 6], -1.0, 1.0, rng);
        let layer = b.layer.clone();
        check_params(&mut row, &b.params, x, [1, spec.channels, 6, 6], rng, |rec, x| layer.record(rec, x))?;
        rows.push(row);
    }
    Ok(rows)
}

fn model(rng: &mut Rng) -> Result<Vec<SuiteRow>> {
    let cfg = ModelConfig::tiny();
    let mut m = Model::<f64>::build(&cfg, rng)?;
    randomize_params(&mut m.params, rng);
    let x = uniform([1, 3, 32, 32], -1.0, 1.0, rng);
    let mut row = SuiteRow::new("model/tiny");
    let arch = m.arch.clone();
    check_params(&mut row, &m.params, x, [1, cfg.num_classes, 1, 1], rng, |rec, x| Ok(arch.record(rec, x)?.logits))?;
    Ok(vec![row])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_round_trip() {
        for s in Scope::ALL {
            assert_eq!(s.name().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn row_tracks_worst_input() {
        let mut row = SuiteRow::new("x");
        let report = grad_check(|t, x| t.sum(x[0]), &[Tensor64::full([1, 1, 2, 2], 1.0)], DEFAULT_STEP, 0).unwrap();
        row.absorb(&report, |i| format!("in{i}"));
        assert_eq!(row.instances, 1);
        assert_eq!(row.coordinates, 4);
        assert_eq!(row.worst_input.as_deref(), Some("in0"));
        assert!(row.passed());
    }
}
