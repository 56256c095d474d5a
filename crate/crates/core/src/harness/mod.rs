//! Training orchestration: run configuration, model assembly, the training
//! loop for teacher and students, and checkpoints.

mod checkpoint;
mod config;
mod inference;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AttentionSource, LrSchedule, ModelRole, Plateau, RunConfig, DEFAULT_LAMBDA_FM};
pub use inference::{infer, Inference, EVAL_BATCH};
pub use model::{Forward, Network, Reference, BACKBONE_PREFIX};
pub use train::{train_student, train_teacher, EpochSummary, TrainRun, TrainingLog, LOG_HEADER};
