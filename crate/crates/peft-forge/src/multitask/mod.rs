//! Synthetic multi-task benchmark, universal dataset construction, the
//! training loop, and exact-match evaluation.

mod data;
mod eval;
mod scenes;
mod tasks;
mod train;

pub use data::{build_universal_dataset, Example, UniversalDataset};
pub use eval::{evaluate, worker_threads, EvalReport};
pub use scenes::{Color, Featurizer, SceneInstance, Shape, CELLS_PER_TOKEN, TOKENS_PER_BOARD};
pub use tasks::{
    generate_tasks, RawExample, Split, SplitSizes, TaskData, TaskSetConfig, TaskSpec, TaskSuite,
    Vocab, BOS, EOS, PAD, SEP,
};
pub use train::{batch_gradients, lr_at, train, AdamW, MetricsRecord, TrainConfig, TrainOutcome};
