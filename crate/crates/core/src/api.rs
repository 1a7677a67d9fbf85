//! Request and response bodies of the HTTP service. Paths are resolved on
//! the server's filesystem.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bench::BenchOptions;
use crate::datagen::SynthRecord;
use crate::error::Error;
use crate::metrics::MetricReport;
use crate::trainer::{StepRecord, TrainOutcome};

/// Error body: a machine-parsable category plus a one-line message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub category: String,
    pub message: String,
}

impl ApiError {
    pub fn new(category: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            category: category.into(),
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self::new(e.category(), e.to_string())
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error[{}]: {}", self.category, self.message)
    }
}

impl std::error::Error for ApiError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub device: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradmapRequest {
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeRequest {
    pub input: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeResponse {
    pub records: Vec<SynthRecord>,
    pub coefficients: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceRequest {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub tile: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceResponse {
    pub written: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub report: MetricReport,
    /// Unpaired files skipped while scanning the dataset.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRequest {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub options: BenchOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Finished,
    /// Stopped on request; the outcome points at `stopped.ckpt`.
    Stopped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStatus {
    pub id: JobId,
    pub state: JobState,
    pub epochs: usize,
    /// Most recent log row.
    pub last: Option<StepRecord>,
    pub outcome: Option<TrainOutcome>,
    pub error: Option<ApiError>,
}
