//! Randomized comparisons of the production kernels against the loop
//! references, shared by the core test suites and the acceptance run.
//!
//! Each sweep draws its cases from a seed, evaluates the production path
//! at element type `T` and the reference in `f64` on the same (already
//! rounded) inputs and weights, and reports the worst disagreement.

use convformer_core::autodiff::suite::randomize_params;
use convformer_core::autodiff::Tape;
use convformer_core::backbone::{ConvFormerBlock, ModelConfig, StageSpec};
use convformer_core::mca::{BranchSpec, McaBlock, McaConfig};
use convformer_core::nnops::{self, Activation, BatchNormState, ConvGeometry, Mode, NormConfig};
use convformer_core::rng::Rng;
use convformer_core::tensor::{Element, Init, Tensor};
use convformer_core::Result;

use crate::bridge;
use crate::Geometry;

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub name: String,
    pub cases: usize,
    /// Largest `|production - reference|`.
    pub max_abs: f64,
    /// Largest `|production - reference| / max(1, |reference|)`.
    pub max_scaled: f64,
    /// Description of the case holding `max_abs`.
    pub worst: String,
}

impl Comparison {
    fn new(name: &str) -> Self {
        Comparison { name: name.into(), cases: 0, max_abs: 0.0, max_scaled: 0.0, worst: String::new() }
    }

    fn record(&mut self, got: &[f64], want: &[f64], case: impl FnOnce() -> String) {
        assert_eq!(got.len(), want.len(), "{}: output sizes differ", self.name);
        self.cases += 1;
        let mut abs = 0.0f64;
        for (&g, &w) in got.iter().zip(want) {
            let d = (g - w).abs();
            // NaN compares false; count it as infinitely wrong.
            let d = if d.is_nan() { f64::INFINITY } else { d };
            abs = abs.max(d);
            self.max_scaled = self.max_scaled.max(d / w.abs().max(1.0));
        }
        if abs >= self.max_abs {
            self.max_abs = abs;
            self.worst = case();
        }
    }
}

fn uniform<T: Element>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::create(shape, Init::Uniform { rng, lo, hi }).expect("small shape")
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len())]
}

/// A random convolution case whose output has at least one position.
fn conv_case(rng: &mut Rng) -> ([usize; 4], [usize; 4], ConvGeometry) {
    let depthwise = rng.bernoulli(0.3);
    let groups = if depthwise { 1 + rng.below(6) } else { 1 + rng.below(3) };
    let (cpg, opg) = if depthwise { (1, 1) } else { (1 + rng.below(3), 1 + rng.below(3)) };
    let kernel = 1 + rng.below(7);
    let dilation = 1 + rng.below(3);
    let span = dilation * (kernel - 1) + 1;
    let g = ConvGeometry { stride: 1 + rng.below(3), padding: rng.below(span + 1), dilation, groups };
    let min = span.saturating_sub(2 * g.padding).max(1);
    let x = [1 + rng.below(3), groups * cpg, min + rng.below(6), min + rng.below(6)];
    (x, [groups * opg, cpg, kernel, kernel], g)
}

pub fn conv2d<T: Element>(seed: u64, cases: usize) -> Result<Comparison> {
    let mut rng = Rng::seed(seed);
    let mut cmp = Comparison::new("conv2d");
    for _ in 0..cases {
        let (xd, wd, g) = conv_case(&mut rng);
        let x: Tensor<T> = uniform(xd, -1.0, 1.0, &mut rng);
        let w: Tensor<T> = uniform(wd, -1.0, 1.0, &mut rng);
        let b: Option<Tensor<T>> = rng.bernoulli(0.5).then(|| uniform([1, wd[0], 1, 1], -1.0, 1.0, &mut rng));
        let got = nnops::conv2d_forward(&x, &w, b.as_ref(), g)?;
        let og = Geometry { stride: g.stride, padding: g.padding, dilation: g.dilation, groups: g.groups };
        let bias = b.as_ref().map(bridge::values);
        let (want, od) = crate::conv2d(&bridge::values(&x), xd, &bridge::values(&w), wd, bias.as_deref(), og);
        assert_eq!(got.dims(), od, "conv2d output shape for {xd:?} {wd:?} {g:?}");
        cmp.record(&bridge::values(&got), &want, || format!("x {xd:?} w {wd:?} {g:?}"));
    }
    Ok(cmp)
}

fn small_dims(rng: &mut Rng) -> [usize; 4] {
    [1 + rng.below(3), 1 + rng.below(6), 1 + rng.below(7), 1 + rng.below(7)]
}

pub fn global_avg_pool<T: Element>(seed: u64, cases: usize) -> Result<Comparison> {
    let mut rng = Rng::seed(seed);
    let mut cmp = Comparison::new("global_avg_pool");
    for _ in 0..cases {
        let d = small_dims(&mut rng);
        let x: Tensor<T> = uniform(d, -1.0, 1.0, &mut rng);
        let got = nnops::global_avg_pool(&x)?;
        let want = crate::global_avg_pool(&bridge::values(&x), d);
        cmp.record(&bridge::values(&got), &want, || format!("x {d:?}"));
    }
    Ok(cmp)
}

pub fn linear<T: Element>(seed: u64, cases: usize) -> Result<Comparison> {
    let mut rng = Rng::seed(seed);
    let mut cmp = Comparison::new("linear");
    for _ in 0..cases {
        let d = small_dims(&mut rng);
        let out = 1 + rng.below(8);
        let x: Tensor<T> = uniform(d, -1.0, 1.0, &mut rng);
        let w: Tensor<T> = uniform([d[1], out, 1, 1], -1.0, 1.0, &mut rng);
        let b: Option<Tensor<T>> = rng.bernoulli(0.5).then(|| uniform([1, out, 1, 1], -1.0, 1.0, &mut rng));
        let got = nnops::linear_forward(&x, &w, b.as_ref())?;
        let bias = b.as_ref().map(bridge::values);
        let (want, _) = crate::linear(&bridge::values(&x), d, &bridge::values(&w), out, bias.as_deref());
        cmp.record(&bridge::values(&got), &want, || format!("x {d:?} out {out}"));
    }
    Ok(cmp)
}

pub fn batchnorm<T: Element>(seed: u64, cases: usize) -> Result<Comparison> {
    let mut rng = Rng::seed(seed);
    let mut cmp = Comparison::new("batchnorm");
    for i in 0..cases {
        let d = small_dims(&mut rng);
        let mode = if i % 2 == 0 { Mode::Eval } else { Mode::Train };
        let mut state = BatchNormState::<T>::new(d[1], NormConfig::default(), mode);
        state.gamma = uniform([1, d[1], 1, 1], 0.5, 1.5, &mut rng);
        state.beta = uniform([1, d[1], 1, 1], -0.5, 0.5, &mut rng);
        state.running_mean = uniform([1, d[1], 1, 1], -0.5, 0.5, &mut rng);
        state.running_var = uniform([1, d[1], 1, 1], 0.5, 1.5, &mut rng);
        let norm = crate::Norm {
            gamma: bridge::values(&state.gamma),
            beta: bridge::values(&state.beta),
            mean: bridge::values(&state.running_mean),
            var: bridge::values(&state.running_var),
            eps: state.config.epsilon,
        };
        let x: Tensor<T> = uniform(d, -1.0, 1.0, &mut rng);
        let got = nnops::batchnorm2d(&x, &mut state)?;
        let want = crate::batchnorm(&bridge::values(&x), d, &norm, mode == Mode::Train);
        cmp.record(&bridge::values(&got), &want, || format!("x {d:?} {mode:?}"));
    }
    Ok(cmp)
}

pub fn activations<T: Element>(seed: u64, cases: usize) -> Result<Comparison> {
    let mut rng = Rng::seed(seed);
    let mut cmp = Comparison::new("activations");
    for _ in 0..cases {
        let d = small_dims(&mut rng);
        let x: Tensor<T> = uniform(d, -6.0, 6.0, &mut rng);
        let xs = bridge::values(&x);
        for (kind, f) in [
            (Activation::Relu, crate::relu as fn(f64) -> f64),
            (Activation::Gelu, crate::gelu),
            (Activation::Sigmoid, crate::sigmoid),
        ] {
            let got = nnops::activation(&x, kind);
            let want: Vec<f64> = xs.iter().map(|&v| f(v)).collect();
            cmp.record(&bridge::values(&got), &want, || format!("{kind:?} on {d:?}"));
        }
    }
    Ok(cmp)
}

pub fn cross_entropy(seed: u64, cases: usize) -> Result<Comparison> {
    let mut rng = Rng::seed(seed);
    let mut cmp = Comparison::new("cross_entropy");
    for _ in 0..cases {
        let n = 1 + rng.below(4);
        let k = 2 + rng.below(10);
        let logits: Tensor<f32> = uniform([n, k, 1, 1], -5.0, 5.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let want = crate::cross_entropy(&bridge::values(&logits), k, &labels);
        let metric = convformer_core::train::cross_entropy(&logits, &labels)?;
        cmp.record(&[metric], &[want], || format!("metric {n}x{k}"));
        let mut tape = Tape::new();
        let z = tape.leaf(logits.cast::<f64>());
        let loss = tape.cross_entropy(z, &labels)?;
        cmp.record(tape.value(loss).data(), &[want], || format!("tape {n}x{k}"));
    }
    Ok(cmp)
}

fn random_mca_config(rng: &mut Rng, channels: usize) -> McaConfig {
    let branch = |rng: &mut Rng| BranchSpec::new(pick(rng, &[1, 3, 5, 7]), 1 + rng.below(3));
    let count = 1 + rng.below(3);
    let divisors: Vec<usize> = (1..=channels).filter(|r| channels.is_multiple_of(*r)).collect();
    McaConfig {
        expand: 1 + rng.below(4),
        branches: (0..count).map(|_| branch(rng)).collect(),
        single_branch: branch(rng),
        gate_reduction: pick(rng, &divisors),
        use_expand: rng.bernoulli(0.7),
        use_parallel: rng.bernoulli(0.7),
        use_inner_residual: rng.bernoulli(0.7),
        use_gating: rng.bernoulli(0.7),
        use_output_proj: rng.bernoulli(0.7),
    }
}

/// Full MCA layers over random widths, branch sets, toggles, resolutions
/// and both batch-norm modes.
pub fn mca<T: Element>(seed: u64, cases: usize) -> Result<Comparison> {
    let mut rng = Rng::seed(seed);
    let mut cmp = Comparison::new("mca");
    for _ in 0..cases {
        let channels = 1 + rng.below(6);
        let cfg = random_mca_config(&mut rng, channels);
        let mut wide = McaBlock::<f64>::new(channels, &cfg, NormConfig::default(), &mut rng)?;
        randomize_params(&mut wide.params, &mut rng);
        let mut block = McaBlock::<T> { layer: wide.layer, params: wide.params.cast() };
        let d = [1 + rng.below(3), channels, 1 + rng.below(9), 1 + rng.below(9)];
        let mode = if rng.bernoulli(0.5) { Mode::Train } else { Mode::Eval };
        let x: Tensor<T> = uniform(d, -1.0, 1.0, &mut rng);
        let reference = bridge::mca(&block.layer, &block.params);
        let got = block.forward(&x, mode)?;
        let want = crate::mca(&bridge::values(&x), d, &reference, mode == Mode::Train);
        cmp.record(&bridge::values(&got), &want, || format!("x {d:?} {mode:?} {cfg:?}"));
    }
    Ok(cmp)
}

/// Whole blocks (norms, MCA, MLP, both residuals) with drop-path off.
pub fn block<T: Element>(seed: u64, cases: usize) -> Result<Comparison> {
    let mut rng = Rng::seed(seed);
    let mut cmp = Comparison::new("convformer_block");
    for _ in 0..cases {
        let channels = 1 + rng.below(8);
        let spec = StageSpec::new(channels, 1, 1 + rng.below(4));
        let cfg = ModelConfig { mca: random_mca_config(&mut rng, channels), ..ModelConfig::tiny() };
        let mut wide = ConvFormerBlock::<f64>::new(spec, &cfg, 0.0, &mut rng)?;
        randomize_params(&mut wide.params, &mut rng);
        let mut b = ConvFormerBlock::<T> { layer: wide.layer, params: wide.params.cast() };
        let d = [1 + rng.below(3), channels, 1 + rng.below(8), 1 + rng.below(8)];
        let mode = if rng.bernoulli(0.5) { Mode::Train } else { Mode::Eval };
        let x: Tensor<T> = uniform(d, -1.0, 1.0, &mut rng);
        let reference = bridge::block(&b.layer, &b.params);
        let got = b.forward(&x, mode, None)?;
        let want = crate::block(&bridge::values(&x), d, &reference, mode == Mode::Train);
        cmp.record(&bridge::values(&got), &want, || format!("x {d:?} {mode:?} {spec:?}"));
    }
    Ok(cmp)
}

/// Every operator sweep with `cases` cases each.
pub fn operators<T: Element>(seed: u64, cases: usize) -> Result<Vec<Comparison>> {
    Ok(vec![
        conv2d::<T>(seed, cases)?,
        global_avg_pool::<T>(seed + 1, cases)?,
        linear::<T>(seed + 2, cases)?,
        batchnorm::<T>(seed + 3, cases)?,
        activations::<T>(seed + 4, cases)?,
        cross_entropy(seed + 5, cases)?,
    ])
}
