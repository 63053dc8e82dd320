use convformer_core::backbone::{Model, ModelConfig};
use convformer_core::nnops::Mode;
use convformer_core::rng::Rng;
use convformer_core::train::{evaluate, make_toy_dataset, train_steps, OptimConfig, ToyDataset, TrainConfig};
use convformer_core::Error;

fn data() -> ToyDataset {
    make_toy_dataset(0, 60, 10, 32).unwrap()
}

fn model(seed: u64) -> Model<f32> {
    Model::build(&ModelConfig::tiny(), &mut Rng::seed(seed)).unwrap()
}

fn config(optim: OptimConfig) -> TrainConfig {
    TrainConfig { optim, batch_size: 16 }
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let data = data();
    let mut m = model(0);
    let optim = OptimConfig { learning_rate: 0.0, ..OptimConfig::default() };
    let log = train_steps(&mut m, &data, &config(optim), 4, 1).unwrap();
    let (initial, _) = evaluate(&model(0), &data, Mode::Train).unwrap();
    assert_eq!(log.len(), 4);
    assert!(log.iter().all(|r| r.loss == initial), "{log:?} vs {initial}");
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2, 3, 4]);
}

#[test]
fn same_seed_gives_identical_logs() {
    let data = data();
    let run = |seed| {
        let mut m = model(2);
        let log = train_steps(&mut m, &data, &config(OptimConfig::default()), 6, seed).unwrap();
        (log, m.params)
    };
    let (a, pa) = run(3);
    let (b, pb) = run(3);
    let (c, _) = run(4);
    assert_eq!(a, b);
    assert!(pa.bit_eq(&pb));
    assert_ne!(a, c);
}

#[test]
fn loss_falls_over_a_short_run() {
    let data = data();
    let mut m = model(5);
    let (initial, _) = evaluate(&m, &data, Mode::Train).unwrap();
    let log = train_steps(&mut m, &data, &config(OptimConfig::default()), 30, 6).unwrap();
    assert!(log.last().unwrap().loss < 0.8 * initial, "{initial} -> {:?}", log.last());
}

#[test]
fn zero_steps_is_an_empty_log() {
    let mut m = model(7);
    let before = m.params.clone();
    assert!(train_steps(&mut m, &data(), &TrainConfig::default(), 0, 0).unwrap().is_empty());
    assert!(m.params.bit_eq(&before));
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let mut m = model(8);
    let r = train_steps(&mut m, &data(), &config(OptimConfig::sgd(1e30, 0.0)), 20, 9);
    assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
}

#[test]
fn classes_are_separable_from_raw_pixels() {
    // nearest class mean, fitted on one dataset and scored on another
    let (fit, score) = (make_toy_dataset(1, 200, 10, 16).unwrap(), make_toy_dataset(2, 200, 10, 16).unwrap());
    let per = fit.images.len() / fit.len();
    let sample = |d: &ToyDataset, i: usize| d.images.data()[i * per..][..per].to_vec();
    let mut means = vec![vec![0.0f64; per]; 10];
    let mut counts = [0usize; 10];
    for (i, &label) in fit.labels.iter().enumerate() {
        counts[label] += 1;
        for (m, v) in means[label].iter_mut().zip(sample(&fit, i)) {
            *m += f64::from(v);
        }
    }
    assert!(counts.iter().all(|&c| c == 20));
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let centred = |v: &[f64]| {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| x - mu).collect::<Vec<_>>()
    };
    let means: Vec<Vec<f64>> = means.iter().map(|m| centred(m)).collect();
    let correct = (0..score.len())
        .filter(|&i| {
            let x = centred(&sample(&score, i).iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
            let dist = |m: &Vec<f64>| m.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..10).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            best == score.labels[i]
        })
        .count();
    assert!(correct as f64 / score.len() as f64 > 0.5, "{correct} of {}", score.len());
}
