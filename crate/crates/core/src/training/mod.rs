//! Model assembly, objective, optimizer, checkpoints and the training loop.

mod checkpoint;
mod config;
mod model;
mod optim;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{BprReduction, ModelConfig, Variant, ARCHITECTURE_KEYS, CONFIG_KEYS};
pub use model::{bpr_loss, score, ItemEmbedding, ItemEncoding, LossBreakdown, Model};
pub use optim::Adam;
pub use trainer::{train, EpochLog, TrainOutcome};
