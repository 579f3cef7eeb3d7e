//! Experiment plumbing: configuration, synthetic data, drivers and statistics.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod stats;

pub use config::{AuditConfig, DatasetConfig, ExperimentConfig, GuidanceSettings, SkewRow, TrainingConfig, CONFIG_VERSION};
pub use dataset::{generate_dataset, render, toy_group_classifier, Dataset, GroupLabel, Manifest, Scene, SceneSpec};
pub use experiment::{
    compare, evaluate, gradcheck, image_metrics, report, train, write_outputs, GradcheckReport, RunMode, RunOutput,
    TrainingSummary,
};
pub use stats::{pooled_standard_error, sign_test_lower, SignTest};
