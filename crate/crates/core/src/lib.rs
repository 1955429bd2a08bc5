//! Detect benchmark overfitting in multiple-choice QA models: rephrase a
//! benchmark at a controlled distortion level, evaluate models on paired
//! original/rephrased questions, and flag statistically significant
//! degradation with McNemar's test.
//!
//! Modules follow the pipeline stages:
//!
//! * [`dataset`] — ingest, validate, subsample, persist benchmarks
//! * [`perturb`] — the distortion operator over a chat provider, cached
//! * [`quality`] — cosine-similarity and judge gates plus the audit queue
//! * [`eval`] — paired evaluation under the fixed query prompt
//! * [`stats`] — McNemar chi-squared / exact tests and delta metrics
//! * [`report`] — result tables, log fit, scatter exports, subject splits
//! * [`synth`] — synthetic contingency draws for power/calibration studies
//! * [`pipeline`] — end-to-end run with a reproducibility manifest

pub mod cache;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod perturb;
pub mod pipeline;
pub mod provider;
pub mod quality;
pub mod report;
pub mod stats;
pub mod synth;

pub use dataset::{BenchmarkSample, Dataset};
pub use error::{Error, Result};
pub use eval::{ContingencyTable, PairedOutcome, Respondent};
pub use perturb::{DistortionConfig, PerturbedDataset, RephraseRecord};
pub use pipeline::{RunConfig, RunManifest};
pub use quality::{JudgeVerdict, SimilarityStats};
pub use stats::{DeltaMetrics, McNemarResult};
pub use synth::{PowerReport, SynthSpec};
