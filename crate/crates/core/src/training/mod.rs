//! Few-shot adapter fine-tuning with a spatially reweighted denoising loss.

mod checkpoint;
mod finetune;
mod loss;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use finetune::{
    finetune, loss_final, smoothed_loss, FinetuneConfig, LogEntry, SampleSource, TrainOutcome, TrainSample,
};
pub use loss::{loss_re, loss_re_with_grad, LossWeights};
pub use optim::Adam;
