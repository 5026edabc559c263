//! End-to-end detection pipeline: data ingestion, preprocessing, template
//! training, detection, evaluation and cross-validation.

pub mod config;
pub mod detect;
pub mod evaluate;
pub mod imageio;
pub mod kfold;
pub mod manifest;
pub mod patches;
pub mod preprocess;
pub mod synth;
pub mod timing;

pub use config::PipelineConfig;
pub use detect::{DetectionResult, Model, NamedTemplate, TargetHit};
pub use evaluate::{evaluate, Criterion, EvaluationReport};
pub use kfold::{run_kfold, KfoldOutcome};
pub use manifest::{DatasetManifest, ManifestRecord};
pub use synth::{SynthKind, SynthParams};
