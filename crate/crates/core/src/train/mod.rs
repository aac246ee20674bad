//! Optimisation, evaluation, run records and the loss ablation.

pub mod ablation;
pub mod adam;
pub mod metrics;
pub mod record;
pub mod trainer;

pub use ablation::{run_ablation, AblationReport, AblationRow};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use metrics::ConfusionMatrix;
pub use record::{moving_average, EpochRecord, RunRecord};
pub use trainer::{
    evaluate, evaluate_sequences, init_thread_pool, load_data, open_manifest, train, train_from_manifest, Dataset,
    Evaluation, TrainOutcome, Trainer,
};
