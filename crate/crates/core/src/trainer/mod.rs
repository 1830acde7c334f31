//! Desk-scale end-to-end training: a small MLP, synthetic ID/OOD data and
//! the blended loss with per-batch EMA statistics.

pub mod mlp;
pub mod task;
pub mod train;

pub use mlp::{Activation, ForwardCache, ForwardPass, Gradients, Layer, MlpModel, Sgd};
pub use task::{make_synthetic_task, GeneratorParams, SyntheticTask};
pub use train::{
    accuracy, extract_features, extract_logits, gaussian_log_likelihood, train,
    write_history_jsonl, EpochRecord, TrainConfig, TrainOutcome,
};
