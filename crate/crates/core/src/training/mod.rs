//! Wait-k paths, label-smoothed path losses, Adam with an inverse square-root
//! schedule, finite-difference gradient checks and the training loop.

mod adam;
mod gradcheck;
mod loss;
mod trainer;
mod waitk;

pub use adam::{adam_update, lr_at, AdamConfig, OptimizerState};
pub use gradcheck::{grad_check, GradCheckReport, Probe};
pub use loss::{
    exhaustive_multi_path_loss, label_smoothed_nll, multi_path_loss, multi_path_loss_and_grad,
    path_loss, path_loss_and_grad, sample_k, LossConfig, LossMode,
};
pub use trainer::{best_epoch, train, write_training_log, EpochLog, TrainConfig, TrainOutcome};
pub use waitk::{wait_k_z, WaitK, WaitKPath};
