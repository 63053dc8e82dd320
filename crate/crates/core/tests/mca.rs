use convformer_core::accounting::count_config;
use convformer_core::autodiff::suite::randomize_params;
use convformer_core::backbone::ModelConfig;
use convformer_core::mca::{BranchSpec, McaBlock, McaConfig};
use convformer_core::nnops::{Mode, NormConfig};
use convformer_core::params::ParamSet;
use convformer_core::rng::Rng;
use convformer_core::tensor::Init;
use convformer_core::{Element, Tensor};
use proptest::prelude::*;

fn input<T: Element>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    Tensor::create(shape, Init::Uniform { rng: &mut Rng::seed(seed), lo: -1.0, hi: 1.0 }).unwrap()
}

fn block<T: Element>(channels: usize, cfg: &McaConfig, seed: u64) -> McaBlock<T> {
    McaBlock::new(channels, cfg, NormConfig::default(), &mut Rng::seed(seed)).unwrap()
}

/// A block with every parameter and statistic redrawn away from its
/// initial value, so that no path is trivially zero.
fn random_block(channels: usize, cfg: &McaConfig, seed: u64) -> McaBlock<f64> {
    let mut b = block(channels, cfg, seed);
    randomize_params(&mut b.params, &mut Rng::seed(seed ^ 0x5eed));
    b
}

fn set<T: Element>(params: &mut ParamSet<T>, name: &str, value: T) {
    let id = params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let shape = params.value(id).shape();
    params.assign(id, Tensor::full(shape, value)).unwrap();
}

fn arb_config() -> impl Strategy<Value = (usize, McaConfig)> {
    let branch = (0usize..4, 1usize..4).prop_map(|(k, d)| BranchSpec::new(2 * k + 1, d));
    (1usize..10, 1usize..4, proptest::collection::vec(branch.clone(), 1..4), branch, any::<[bool; 5]>(), 1usize..5)
        .prop_map(|(channels, expand, branches, single, t, r)| {
            let gate_reduction = (1..=r).rev().find(|d| channels % d == 0).unwrap();
            let cfg = McaConfig {
                expand,
                branches,
                single_branch: single,
                gate_reduction,
                use_expand: t[0],
                use_parallel: t[1],
                use_inner_residual: t[2],
                use_gating: t[3],
                use_output_proj: t[4],
            };
            (channels, cfg)
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn output_shape_equals_input_shape(
        (channels, cfg) in arb_config(),
        n in 1usize..3,
        h in 1usize..9,
        w in 1usize..9,
        seed in any::<u64>(),
        train in any::<bool>(),
    ) {
        let mut b = block::<f32>(channels, &cfg, seed);
        let x = input([n, channels, h, w], seed ^ 1);
        let mode = if train { Mode::Train } else { Mode::Eval };
        let y = b.forward(&x, mode).unwrap();
        prop_assert_eq!(y.dims(), x.dims());
        prop_assert!(y.all_finite());
    }

    #[test]
    fn attention_is_a_probability_per_channel(seed in any::<u64>(), n in 1usize..4) {
        let b = random_block(6, &McaConfig { gate_reduction: 2, ..McaConfig::default() }, seed);
        let a = b.attention(&input([n, 6, 4, 4], seed ^ 2)).unwrap();
        prop_assert_eq!(a.dims(), [n, 6, 1, 1]);
        prop_assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn attention_depends_on_the_input() {
    let b = random_block(8, &McaConfig::default(), 3);
    let a1 = b.attention(&input([1, 8, 6, 6], 10)).unwrap();
    let a2 = b.attention(&input([1, 8, 6, 6], 11)).unwrap();
    assert!(a1.max_abs_diff(&a2).unwrap() > 1e-3, "attention is input independent");
}

#[test]
fn saturated_gate_passes_everything() {
    let mut b = random_block(8, &McaConfig::default(), 4);
    set(&mut b.params, "gate.fc2.bias", 50.0);
    set(&mut b.params, "gate.fc2.weight", 0.0);
    let a = b.attention(&input([2, 8, 5, 5], 12)).unwrap();
    assert!(a.data().iter().all(|&v| (1.0 - v).abs() <= 1e-9));
}

#[test]
fn zero_gate_halves_the_ungated_output_exactly() {
    let gated = McaConfig::default();
    let ungated = McaConfig { use_gating: false, ..McaConfig::default() };
    let mut on = block::<f32>(8, &gated, 5);
    let mut off = block::<f32>(8, &ungated, 6);
    for (id, p) in off.params.iter() {
        let target = on.params.find(&p.name).unwrap();
        on.params.assign(target, off.params.value(id).clone()).unwrap();
    }
    for name in ["gate.fc1.weight", "gate.fc1.bias", "gate.fc2.weight", "gate.fc2.bias"] {
        set(&mut on.params, name, 0.0);
    }
    let x = input([2, 8, 6, 6], 13);
    let y_on = on.forward(&x, Mode::Eval).unwrap();
    let y_off = off.forward(&x, Mode::Eval).unwrap();
    assert!(y_on.bit_eq(&y_off.scale(0.5)));
}

#[test]
fn zero_output_conv_silences_the_block() {
    let mut b = block::<f32>(8, &McaConfig::default(), 7);
    set(&mut b.params, "out.weight", 0.0);
    set(&mut b.params, "out.bias", 0.0);
    let y = b.forward(&input([2, 8, 6, 6], 14), Mode::Eval).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn samples_are_processed_independently() {
    let b = random_block(4, &McaConfig::default(), 8);
    let x: Tensor<f64> = input([3, 4, 5, 5], 15);
    let per = x.len() / 3;
    let order = [2, 0, 1];
    let permuted: Vec<f64> = order.iter().flat_map(|&i| x.data()[i * per..][..per].to_vec()).collect();
    let xp = Tensor::new(x.dims(), permuted).unwrap();

    let a = b.attention(&x).unwrap();
    let ap = b.attention(&xp).unwrap();
    let mut fwd = b.clone();
    let y = fwd.forward(&x, Mode::Eval).unwrap();
    let yp = fwd.forward(&xp, Mode::Eval).unwrap();
    for (slot, &i) in order.iter().enumerate() {
        assert_eq!(ap.data()[slot * 4..][..4], a.data()[i * 4..][..4]);
        assert_eq!(yp.data()[slot * per..][..per], y.data()[i * per..][..per]);
    }
}

#[test]
fn gating_costs_two_linear_layers_per_block() {
    let base = ModelConfig::tiny();
    for r in [1, 2, 4, 8] {
        let mut gated = base.clone();
        gated.mca.gate_reduction = r;
        let mut ungated = gated.clone();
        ungated.mca.use_gating = false;
        let with = count_config(&gated, None).unwrap().total_params;
        let without = count_config(&ungated, None).unwrap().total_params;
        let expected: usize = base
            .stages
            .iter()
            .map(|s| {
                let c = s.channels;
                s.blocks * (2 * c * c / r + c / r + c)
            })
            .sum();
        assert_eq!(with - without, expected as u64, "reduction {r}");
    }
}

#[test]
fn single_branch_equals_three_branches_with_two_silenced() {
    let three_cfg = McaConfig::default();
    let single_cfg = McaConfig { use_parallel: false, ..McaConfig::default() };
    assert_eq!(single_cfg.single_branch, three_cfg.branches[2]);

    let mut single = random_block(4, &single_cfg, 9);
    let mut three = block::<f64>(4, &three_cfg, 10);
    for (id, p) in single.params.iter() {
        let name = p.name.replace("branches.0.", "branches.2.");
        let target = three.params.find(&name).unwrap();
        three.params.assign(target, single.params.value(id).clone()).unwrap();
    }
    set(&mut three.params, "branches.0.weight", 0.0);
    set(&mut three.params, "branches.1.weight", 0.0);

    for (i, mode) in [Mode::Eval, Mode::Train].into_iter().enumerate() {
        let x = input([2, 4, 9, 9], 16 + i as u64);
        let a = single.forward(&x, mode).unwrap();
        let b = three.forward(&x, mode).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-6, "{mode:?}");
    }
    let stats = |p: &ParamSet<f64>| p.value(p.find("branch_norm.running_var").unwrap()).clone();
    assert!(stats(&single.params).max_abs_diff(&stats(&three.params)).unwrap() <= 1e-6);
}
