use convformer_core::accounting::{count_config, count_flops};
use convformer_core::backbone::{Model, ModelConfig, StageSpec};
use convformer_core::nnops::{
    activation, batchnorm2d, conv2d_forward, drop_path, drop_path_mask, Activation, BatchNormState, ConvGeometry, Mode,
    NormConfig,
};
use convformer_core::rng::Rng;
use convformer_core::tensor::Init;
use convformer_core::{Error, Tensor, Tensor64};
use proptest::prelude::*;

fn uniform<T: convformer_core::Element>(shape: [usize; 4], seed: u64, bound: f64) -> Tensor<T> {
    Tensor::create(shape, Init::Uniform { rng: &mut Rng::seed(seed), lo: -bound, hi: bound }).unwrap()
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

#[test]
fn flat_index_formula_on_every_small_shape() {
    for n in 1..=3 {
        for c in 1..=3 {
            for h in 1..=3 {
                for w in 1..=3 {
                    let len = n * c * h * w;
                    let mut t: Tensor = Tensor::new([n, c, h, w], (0..len).map(|i| i as f32).collect()).unwrap();
                    for (i, j, k, l) in coords(n, c, h, w) {
                        let expect = ((i * c + j) * h + k) * w + l;
                        assert_eq!(t.shape().index(i, j, k, l), expect);
                        assert_eq!(t.get(i, j, k, l), expect as f32);
                        t.set(i, j, k, l, -1.0);
                        assert_eq!(t.data()[expect], -1.0);
                    }
                }
            }
        }
    }
}

fn coords(n: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (0..n).flat_map(move |i| (0..c).flat_map(move |j| (0..h).flat_map(move |k| (0..w).map(move |l| (i, j, k, l)))))
}

#[test]
fn drop_path_at_half_keeps_half_and_doubles() {
    let x: Tensor = Tensor::full([1000, 1, 1, 1], 1.0);
    let y = drop_path(&x, 0.5, Mode::Train, &mut Rng::seed(0)).unwrap();
    let kept = y.data().iter().filter(|&&v| v != 0.0).count();
    assert!((kept as f64 / 1000.0 - 0.5).abs() <= 0.05, "kept {kept}");
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn addition_is_commutative_and_deterministic(seed in any::<u64>(), c in 1usize..5, h in 1usize..6) {
        let a: Tensor = uniform([2, c, h, 3], seed, 10.0);
        let b: Tensor = uniform([2, c, h, 3], seed ^ 1, 10.0);
        prop_assert!(a.add(&b).unwrap().bit_eq(&b.add(&a).unwrap()));
        let again: Tensor = uniform([2, c, h, 3], seed, 10.0);
        prop_assert!(a.bit_eq(&again));
        prop_assert!(a.mul(&b).unwrap().bit_eq(&again.mul(&b).unwrap()));
    }

    #[test]
    fn conv_output_size_follows_the_formula(
        seed in any::<u64>(),
        h in 1usize..12,
        w in 1usize..12,
        kernel in 1usize..6,
        stride in 1usize..4,
        padding in 0usize..4,
        dilation in 1usize..4,
    ) {
        let x: Tensor = uniform([1, 2, h, w], seed, 1.0);
        let weight: Tensor = uniform([3, 2, kernel, kernel], seed ^ 7, 1.0);
        let g = ConvGeometry { stride, padding, dilation, groups: 1 };
        let size = |n: usize| {
            let v = n as i64 + 2 * padding as i64 - dilation as i64 * (kernel as i64 - 1) - 1;
            if v < 0 { None } else { Some(v as usize / stride + 1) }
        };
        match (size(h), size(w)) {
            (Some(ho), Some(wo)) => {
                let y = conv2d_forward(&x, &weight, None, g).unwrap();
                prop_assert_eq!(y.dims(), [1, 3, ho, wo]);
                prop_assert_eq!(g.output_size(h, kernel), Some(ho));
            }
            _ => {
                let r = conv2d_forward(&x, &weight, None, g);
                prop_assert!(matches!(r, Err(Error::Geometry { .. })), "{:?}", r.map(|t| t.dims()));
            }
        }
    }

    #[test]
    fn relu_and_sigmoid_are_monotone(seed in any::<u64>()) {
        let mut xs: Vec<f64> = uniform::<f64>([1, 1, 1, 256], seed, 30.0).into_data();
        xs.sort_by(f64::total_cmp);
        let sorted64: Tensor64 = Tensor::new([1, 1, 1, 256], xs.clone()).unwrap();
        let sorted32: Tensor = sorted64.cast();
        for kind in [Activation::Relu, Activation::Sigmoid] {
            let y64 = activation(&sorted64, kind);
            prop_assert!(y64.data().windows(2).all(|p| p[0] <= p[1]));
            let y32 = activation(&sorted32, kind);
            prop_assert!(y32.data().windows(2).all(|p| p[0] <= p[1]));
        }
        // f64 resolves 1 - sigmoid(x) for |x| <= 30; f32 only up to about 16.
        prop_assert!(activation(&sorted64, Activation::Sigmoid).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let narrow: Tensor = sorted64.map(|v| v * 16.0 / 30.0).cast();
        prop_assert!(activation(&narrow, Activation::Sigmoid).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn eval_batchnorm_leaves_statistics_alone(seed in any::<u64>(), c in 1usize..6) {
        let mut state = BatchNormState::<f32>::new(c, NormConfig::default(), Mode::Eval);
        state.running_mean = uniform([1, c, 1, 1], seed, 1.0);
        state.running_var = uniform::<f32>([1, c, 1, 1], seed ^ 3, 0.5).map(|v| v + 1.0);
        let (mean, var) = (state.running_mean.clone(), state.running_var.clone());
        for i in 0..3 {
            let x: Tensor = uniform([4, c, 3, 3], seed.wrapping_add(i), 2.0);
            batchnorm2d(&x, &mut state).unwrap();
        }
        prop_assert!(state.running_mean.bit_eq(&mean));
        prop_assert!(state.running_var.bit_eq(&var));
    }

    #[test]
    fn drop_path_keeps_each_sample_at_rate(seed in any::<u64>(), rate in 0.05f64..0.95) {
        let n = 1000;
        let mask: Vec<f32> = drop_path_mask(n, rate, Mode::Train, &mut Rng::seed(seed)).unwrap().unwrap();
        let scale = (1.0 / (1.0 - rate)) as f32;
        prop_assert!(mask.iter().all(|&v| v == 0.0 || v == scale));
        let keep = 1.0 - rate;
        let frac = mask.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let sigma = (keep * rate / n as f64).sqrt();
        prop_assert!((frac - keep).abs() < 5.0 * sigma, "kept {frac} at keep {keep}");
    }

    #[test]
    fn drop_rates_never_decrease(rate in 0.0f64..0.99, blocks in proptest::collection::vec(1usize..5, 4)) {
        let mut cfg = ModelConfig::tiny();
        cfg.drop_path_rate = rate;
        for (s, &b) in cfg.stages.iter_mut().zip(&blocks) {
            s.blocks = b;
        }
        let rates = cfg.block_drop_rates();
        prop_assert_eq!(rates.len(), blocks.iter().sum::<usize>());
        prop_assert_eq!(rates[0], 0.0);
        prop_assert!(rates.windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(rates.iter().all(|&r| r <= rate));
    }
}

fn scaled(width: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    for (i, s) in cfg.stages.iter_mut().enumerate() {
        *s = StageSpec { channels: width << i, ..*s };
    }
    cfg
}

fn branch_macs(cfg: &ModelConfig) -> u64 {
    let report = count_config(cfg, Some((64, 64))).unwrap();
    report.entries.iter().filter(|e| e.path.contains(".mca.branches.")).map(|e| e.macs).sum()
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn depthwise_macs_scale_linearly_in_channels(width in 1usize..12) {
        let single = branch_macs(&scaled(width));
        prop_assert!(single > 0);
        prop_assert_eq!(branch_macs(&scaled(2 * width)), 2 * single);
    }

    #[test]
    fn counting_ignores_the_seed(a in any::<u64>(), b in any::<u64>()) {
        let cfg = ModelConfig::tiny();
        let m1 = Model::<f32>::build(&cfg, &mut Rng::seed(a)).unwrap();
        let m2 = Model::<f32>::build(&cfg, &mut Rng::seed(b)).unwrap();
        prop_assert_eq!(count_flops(&m1, (64, 64)).unwrap(), count_flops(&m2, (64, 64)).unwrap());
        prop_assert_eq!(count_flops(&m1, (64, 64)).unwrap(), count_config(&cfg, Some((64, 64))).unwrap());
    }

    #[test]
    fn stage_sizes_divide_by_four_through_thirty_two(kh in 1usize..4, kw in 1usize..4, n in 1usize..3) {
        let model = Model::<f32>::build(&ModelConfig::tiny(), &mut Rng::seed(0)).unwrap();
        let (h, w) = (32 * kh, 32 * kw);
        let sizes = model.stage_sizes(&uniform([n, 3, h, w], 1, 1.0)).unwrap();
        let expect: Vec<[usize; 4]> =
            [(8, 4), (16, 8), (32, 16), (64, 32)].iter().map(|&(c, d)| [n, c, h / d, w / d]).collect();
        prop_assert_eq!(sizes, expect);
    }

    #[test]
    fn breakdown_sums_to_totals(width in 1usize..8, h in 1usize..4) {
        let report = count_config(&scaled(width), Some((32 * h, 32))).unwrap();
        let modules = report.by_module();
        prop_assert_eq!(modules.iter().map(|e| e.params).sum::<u64>(), report.total_params);
        prop_assert_eq!(modules.iter().map(|e| e.macs).sum::<u64>(), report.total_macs);
    }
}
