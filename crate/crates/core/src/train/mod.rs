//! Training, evaluation and hyperparameter selection.

pub mod checkpoint;
pub mod config;
pub mod cv;
pub mod eval;
pub mod optim;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, PromptPolicy, TargetProfile, TrainConfig};
pub use cv::{cross_validate, fold_epe, kfold_indices, CvResult, GridPoint};
pub use eval::{evaluate_epe, evaluate_model, EvalReport};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use trainer::{read_log, train, LossRecord, TrainOutcome, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE};
