//! AdamW training with a cosine schedule, and per-length evaluation.

mod eval;
mod optim;
mod trainer;

pub use eval::{argmax, eval_seed, evaluate, table_from_predictions, EvalOptions, EvalRow, EvalTable, Predictor, TrainedModel};
pub use optim::{adamw_step, clip_grad_norm, cosine_schedule, global_norm, AdamWParams, OptimState};
pub use trainer::{loss_and_grads, train, train_seeds, RunConfig, TrainConfig, TrainOutcome};
