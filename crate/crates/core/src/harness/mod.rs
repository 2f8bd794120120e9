//! Desk-scale experiment engine: data generation, the toy model, training,
//! evaluation metrics, checkpoints and the gradient-check suite.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod train;

pub use config::{DataConfig, Optimizer, RunConfig, TrainConfig};
pub use data::{generate_mixture, ClassCluster, DatasetSpec, Mixture, Preset, PresetOptions};
pub use gradsuite::{run_gradsuite, GradSuiteConfig, GradSuiteReport};
pub use metrics::{collapse_score, routing_purity, utilization_matrix, EvalReport, LayerTrace, RunMetrics};
pub use model::{ForwardOptions, Model, ModelConfig};
pub use train::{evaluate, load_data, train, TrainOutcome};
