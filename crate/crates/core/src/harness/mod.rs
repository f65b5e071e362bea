//! Synthetic reference-based super-resolution: scene generation, training
//! and evaluation drivers, and the report builders behind the CLI.

pub mod config;
pub mod data;
pub mod eval;
pub mod fixtures;
pub mod reports;
pub mod scene;
pub mod train;

pub use config::{ExperimentConfig, LrSchedule, TrainSettings, DESK_LR, DESK_WARMUP};
pub use data::{from_model_space, reference_input, to_model_space, Dataset, DatasetConfig, DatasetItem, RefMode};
pub use eval::{
    baseline_metrics, evaluate, evaluate_method, sample_item, sample_item_observed, Aggregate, ImageMetrics, MethodMetrics, MetricsReport,
    BASELINE, MODEL_ROW,
};
pub use fixtures::emit_fixtures;
pub use reports::{ablate_injection, sweep_omega, AblationReport, AblationRow, SweepReport, DEFAULT_OMEGAS};
pub use scene::{generate_scene, make_pair, RefSrPair, SyntheticScene};
pub use train::{draw_batch, smoothed, train, TrainOutcome};
