//! Experiment orchestration: datasets, end-to-end audit runs, reports and
//! plot data.

pub mod bounds;
pub mod config;
pub mod curve;
pub mod data;
pub mod pipeline;

pub use bounds::{simulate_bounds, BoundsConfig};
pub use config::{AuditConfig, CanaryType, DatasetConfig, ExperimentConfig, ProcedureChoice, TrainingPlan};
pub use curve::{emit_steps_curve, StepsCurve};
pub use data::{ingest_cifar_binary, synth_dataset, DatasetSpec};
pub use pipeline::{prepare, run_pipeline, AuditReport, PipelineOutput, Prepared};
