//! Drift-severity-guided fine-tuning: the joint loss, the replay buffer,
//! augmentation, adaptation-set construction and the training loop.

pub mod augment;
pub mod finetune;
pub mod loss;
pub mod replay;
pub mod set;

pub use augment::{perturb, resample_series, resample_window, ResampleOp};
pub use finetune::{fine_tune, fine_tune_iterations, validation_size, FineTuneOptions, FineTuneReport, LevelConfig};
pub use loss::{diff_loss, joint_loss, mse_loss, trend_loss, vol_loss, LossWeights};
pub use replay::{ReplayBuffer, ReplayRecord};
pub use set::{
    build_adaptation_set, retrieve_similar, AdaptationEntry, AdaptationSet, Candidate, Composition, SetInputs, SetParams,
    Source,
};
