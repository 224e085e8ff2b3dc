//! Losses, Adam with sharpness-aware steps, the warm-restart schedule, and
//! the supervised, pretraining and transfer loops.

mod loss;
mod optim;
mod pretrain;
mod schedule;
mod trainer;

pub use loss::{mae, mse};
pub use optim::{adam_step, global_norm, sam_step, AdamConfig, Grads, HasParams, OptState, SamOutcome};
pub use pretrain::{
    attach_head, pretrain_masked, reconstruction_config, transfer_train, Pretrained, TransferMode, FINETUNE_EPOCHS,
    PRETRAIN_EPOCHS, PROBE_EPOCHS,
};
pub use schedule::{cosine_warm_restart_lr, CosineRestarts};
pub use trainer::{
    train, window_batch, EarlyStopping, EpochRecord, Objective, Scheduler, TrainConfig, TrainLog, TrainOutcome,
};
pub(crate) use trainer::{batch_covariates, check_data};
