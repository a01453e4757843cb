//! Human-in-the-loop review service for the IDC patch classifier.
//!
//! A reviewer uploads a patch, sees the active model's prediction, and agrees
//! or corrects it. Corrections accumulate until a retrain is triggered; the
//! retrained checkpoint is registered as a new version and swapped in
//! atomically while predictions keep being served.

pub mod api;
pub mod error;
pub mod protocol;
pub mod registry;
pub mod reviews;
pub mod service;

pub use error::{ErrorBody, ServiceError};
pub use protocol::{
    group_seed, run_validation_protocol, run_validation_protocol_with, select_misclassified, ExperimentGroupResult,
    ProtocolConfig, ProtocolError, Selection, ValidationReport,
};
pub use registry::{ModelRegistry, VersionEntry};
pub use reviews::{ReviewLog, ReviewRecord, Verdict};
pub use service::{metrics_on, ActiveModel, HitlService, JobStatus, ModelInfo, RetrainJob, ReviewPage, ServiceConfig};
