//! Desk-scale training: synthetic data, loss, optimizers and the step loop.

mod dataset;
mod loss;
mod optim;
mod trainer;

pub use dataset::{make_toy_dataset, ToyDataset};
pub use loss::{accuracy, argmax, cross_entropy};
pub use optim::{OptimConfig, OptimState, Optimizer, Schedule};
pub use trainer::{evaluate, train_steps, MetricRow, TrainConfig};
