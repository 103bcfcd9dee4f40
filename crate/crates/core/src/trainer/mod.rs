//! Optimizer, synthetic data, checkpoints and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod train;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{generate_batch, generate_pair, SyntheticBatch, SyntheticPair};
pub use train::{loss_csv, moving_average, train, train_with, write_loss_csv, StepRecord, TrainConfig, TrainOutcome};
