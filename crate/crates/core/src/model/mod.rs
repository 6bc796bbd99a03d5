//! The skeletal-temporal transformer: parameters, forward pass, loss,
//! optimizer and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod optim;
pub mod params;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use forward::{
    block_forward, forward_with, g_conv, label_smoothed_ce, model_forward, predict, skate_embedding, temporal_embedding,
    BlockSpec, ForwardOutput, Mode, ModelVars,
};
pub use optim::{clip_grad_norm, global_norm, AdamW, LrSchedule, OptimConfig};
pub use params::ModelParams;
pub use train::{argmax_rows, train_step, Batch, StepStats};
