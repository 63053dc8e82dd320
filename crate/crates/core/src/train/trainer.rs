use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::layers::Recorder;
use crate::nnops::Mode;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

use super::dataset::ToyDataset;
use super::loss::{accuracy, cross_entropy};
use super::optim::{OptimConfig, OptimState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { optim: OptimConfig::default(), batch_size: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    /// One-based index of the update the metrics were measured after.
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss and accuracy over the whole dataset in one batch. With
/// `Mode::Train` batch norm uses the statistics of the full dataset but
/// running statistics are left untouched and drop-path is off, so the
/// result depends on the learnable parameters only.
pub fn evaluate<T: Element>(model: &Model<T>, data: &ToyDataset, mode: Mode) -> Result<(f64, f64)> {
    let images: Tensor<T> = data.images.cast();
    let mut tape = Tape::new();
    let input = tape.leaf(images);
    let mut rec = Recorder::new(&mut tape, &model.params, mode, None).with_drop_path_mode(Mode::Eval);
    let trace = model.arch.record(&mut rec, input)?;
    let logits = tape.value(trace.logits);
    Ok((cross_entropy(logits, &data.labels)?, accuracy(logits, &data.labels)?))
}

/// Runs `steps` minibatch updates. After each update the full dataset is
/// evaluated as in [`evaluate`] with batch statistics. Deterministic in
/// `seed`, which drives batch order and drop-path.
pub fn train_steps(
    model: &mut Model<f32>,
    data: &ToyDataset,
    config: &TrainConfig,
    steps: usize,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let mut root = Rng::seed(seed);
    let mut order_rng = root.fork(1);
    let mut drop_rng = root.fork(2);
    let mut optim = OptimState::new(config.optim, &model.params);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(steps);

    for step in 1..=steps {
        let mut indices = Vec::with_capacity(config.batch_size);
        while indices.len() < config.batch_size.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order_rng.shuffle(&mut order);
            }
            indices.push(order.pop().expect("refilled above"));
        }
        let (images, labels) = data.batch(&indices)?;

        let mut tape = Tape::new();
        let input = tape.leaf(images);
        let (trace, recording) = model.record(&mut tape, input, Mode::Train, Some(&mut drop_rng))?;
        let loss = tape.cross_entropy(trace.logits, &labels)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let param_grads: Vec<Tensor> = optim
            .param_ids()
            .iter()
            .map(|&id| match recording.node(id) {
                Some(node) => grads.get(node).clone(),
                None => Tensor::zeros_like(model.params.value(id)),
            })
            .collect();
        model.params.apply_stat_updates(&recording.updates);
        optim.update(&mut model.params, &param_grads)?;

        let (loss, accuracy) = evaluate(model, data, Mode::Train)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        log.push(MetricRow { step, loss, accuracy });
    }
    Ok(log)
}
