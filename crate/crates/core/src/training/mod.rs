//! Losses, Adam, the training loop, checkpoints and transfer learning.

mod batch;
mod checkpoint;
mod gradcheck;
mod loss;
mod optim;
mod trainer;

pub use batch::{make_batch, Batch, DecoderBatch};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use gradcheck::{gradcheck_config, model_grad_check, GroupError, ModelGradCheck};
pub use loss::{bce_batch, bce_loss, l2_traj_loss, objective, ted_loss, LossWeights};
pub use optim::{clip_grad_norm, grad_norm, AdamConfig, OptimizerState};
pub use trainer::{
    evaluate, fine_tune, fine_tune_with, frozen_prefixes, train, train_with, transfer_weights, EpochRecord,
    Evaluation, FineTuneOptions, TrainConfig, TrainOutcome,
};
