//! Optimization, metrics, FLOP accounting and feature export.

pub mod adam;
pub mod export;
pub mod flops;
pub mod metrics;
pub mod trainer;

pub use adam::AdamState;
pub use export::{embedding_text, export_embeddings};
pub use flops::{count_flops, lambda_sweep, sweep_table, FlopReport, LayerMacs, SWEEP_LAMBDAS};
pub use metrics::EvalReport;
pub use trainer::{
    batch_loss, evaluate, predict_coords, predict_map, train, train_step, EpochRecord, History,
    TrainOutcome,
};
