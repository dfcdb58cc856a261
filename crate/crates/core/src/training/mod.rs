//! The training objective, timestep sampling, optimizer, checkpoints and the training loop.

pub mod checkpoint;
pub mod config;
pub mod importance;
pub mod loss;
pub mod optim;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{LrDecay, TrainConfig};
pub use importance::{entropy, sample_uniform, ImportanceState};
pub use loss::{batch_loss, compute_loss, ExampleNoise, LossBreakdown, LossItem, LossOptions};
pub use optim::{optimizer_step, AdamHyper, AdamState, StepOutcome};
pub use trainer::{evaluate_loss, final_checkpoint_path, StepReport, Trainer};
