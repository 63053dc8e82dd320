//! Tape gradients against central differences, in 64-bit.

use convformer_core::autodiff::suite::{self, Scope, SuiteRow, OP_INSTANCES, THRESHOLD};
use convformer_core::autodiff::{grad_check, Tape, DEFAULT_STEP};
use convformer_core::layers::Recorder;
use convformer_core::mca::{McaBlock, McaConfig};
use convformer_core::nnops::{Mode, NormConfig};
use convformer_core::rng::Rng;
use convformer_core::tensor::{Init, Tensor64};

fn assert_rows(rows: &[SuiteRow]) {
    for r in rows {
        assert!(r.passed(), "{} max relative error {:e} at {:?}", r.name, r.max_rel_error, r.worst);
        assert!(r.coordinates > 0, "{} checked nothing", r.name);
    }
}

#[test]
fn every_operator() {
    let rows = suite::run(Scope::Ops, 21).unwrap();
    for name in [
        "conv2d",
        "conv2d_mse",
        "batchnorm_eval",
        "batchnorm_train",
        "relu",
        "gelu",
        "sigmoid",
        "global_avg_pool",
        "linear",
        "drop_path",
        "cross_entropy",
    ] {
        let row = rows.iter().find(|r| r.name == name).unwrap_or_else(|| panic!("no {name} row"));
        assert_eq!(row.instances, OP_INSTANCES);
    }
    assert_rows(&rows);
}

#[test]
fn mca_variants() {
    let rows = suite::run(Scope::Mca, 22).unwrap();
    assert_eq!(rows.len(), 6);
    assert_rows(&rows);
}

#[test]
fn convformer_blocks() {
    assert_rows(&suite::run(Scope::Block, 23).unwrap());
}

#[test]
fn tiny_model() {
    assert_rows(&suite::run(Scope::Model, 24).unwrap());
}

#[test]
fn mca_train_mode_norm() {
    let mut rng = Rng::seed(25);
    let mut block = McaBlock::<f64>::new(4, &McaConfig::default(), NormConfig::default(), &mut rng).unwrap();
    suite::randomize_params(&mut block.params, &mut rng);
    let x = Tensor64::create([2, 4, 5, 5], Init::Uniform { rng: &mut rng, lo: -1.0, hi: 1.0 }).unwrap();
    let r = Tensor64::create([2, 4, 5, 5], Init::Uniform { rng: &mut rng, lo: -1.0, hi: 1.0 }).unwrap();
    let report = convformer_core::autodiff::grad_check_refined(
        |tape, ids| {
            let mut rec = Recorder::new(tape, &block.params, Mode::Train, None);
            let y = block.layer.record(&mut rec, ids[0])?;
            let r = tape.leaf(r.clone());
            let p = tape.mul(y, r)?;
            tape.sum(p)
        },
        &[x],
        THRESHOLD,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error() < THRESHOLD, "{report:?}");
}

#[test]
fn eval_drop_path_has_identity_jacobian() {
    let mut rng = Rng::seed(26);
    let x = Tensor64::create([3, 2, 2, 2], Init::Uniform { rng: &mut rng, lo: -1.0, hi: 1.0 }).unwrap();
    let params = convformer_core::params::ParamSet::<f64>::new();
    let n = x.len();
    for k in 0..n {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let mut rec = Recorder::new(&mut tape, &params, Mode::Eval, None);
        let y = rec.drop_path(input, 0.5).unwrap();
        let mut pick = Tensor64::zeros([3, 2, 2, 2]);
        pick.data_mut()[k] = 1.0;
        let pick = tape.leaf(pick);
        let prod = tape.mul(y, pick).unwrap();
        let out = tape.sum(prod).unwrap();
        let row = tape.backward(out).unwrap().get(input).clone();
        for (j, &v) in row.data().iter().enumerate() {
            assert_eq!(v, if j == k { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn every_mca_parameter_gets_a_finite_gradient() {
    let mut rng = Rng::seed(27);
    let block = McaBlock::<f32>::new(4, &McaConfig::default(), NormConfig::default(), &mut rng).unwrap();
    let x = convformer_core::Tensor::create([1, 4, 8, 8], Init::Uniform { rng: &mut rng, lo: -1.0, hi: 1.0 }).unwrap();
    let mut tape = Tape::new();
    let input = tape.leaf(x);
    let mut rec = Recorder::new(&mut tape, &block.params, Mode::Eval, None);
    let y = block.layer.record(&mut rec, input).unwrap();
    let recording = rec.finish();
    let loss = tape.mean(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut seen = 0;
    for id in block.params.learnable_ids() {
        let node = recording.node(id).unwrap_or_else(|| panic!("{} unused", block.params.get(id).name));
        let g = grads.get(node);
        assert_eq!(g.shape(), block.params.value(id).shape());
        assert!(g.all_finite(), "{}", block.params.get(id).name);
        seen += 1;
    }
    assert_eq!(seen, block.params.learnable_ids().count());
    assert!(grads.get(input).all_finite());
}

#[test]
fn sigmoid_sum_is_tight() {
    let mut rng = Rng::seed(28);
    let x = Tensor64::create([2, 3, 4, 4], Init::Uniform { rng: &mut rng, lo: -4.0, hi: 4.0 }).unwrap();
    let f = |t: &mut Tape<f64>, ids: &[convformer_core::autodiff::NodeId]| {
        let s = t.activation(ids[0], convformer_core::nnops::Activation::Sigmoid)?;
        t.sum(s)
    };
    assert!(grad_check(f, &[x], DEFAULT_STEP, 1).unwrap().max_rel_error() < 1e-6);
}
