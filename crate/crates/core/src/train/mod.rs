pub mod batching;
pub mod checkpoint;
pub mod optim;
pub mod stage;

pub use batching::{make_batches, MAX_BATCH_SECONDS};
pub use optim::{adam_step, clip_global_norm, lr_at, AdamConfig, OptimizerState};
