//! Logical anomaly detection by checklist question answering.
//!
//! A vision-language backend describes a few normal images, turns the
//! descriptions into a checklist of yes/no Main-Qs, paraphrases each into
//! five Sub-Qs, and drops questions it gets wrong on normal images. Test
//! images are then judged by majority vote per Main-Q; a single failed Main-Q
//! makes the image anomalous and becomes its explanation. Answer
//! log-probabilities give a continuous anomaly score for evaluation.

pub mod backend;
pub mod config;
pub mod crops;
pub mod dataset;
pub mod demo;
pub mod error;
pub mod exec;
pub mod filtering;
pub mod inference;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod session;
pub mod synthesis;

pub use config::RunConfig;
pub use dataset::{DatasetManifest, Label, Layout, Split};
pub use error::{Error, Result, Stage};
pub use exec::Executor;
pub use inference::{Answer, ImageVerdict, MainVote, SubAnswer, Verdict};
pub use metrics::{EvalReport, RunMetrics, ScoredSample};
pub use pipeline::{build_backend, Pipeline, VerdictRecord};
pub use synthesis::{MainQuestion, QuestionSet};
