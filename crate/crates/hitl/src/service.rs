//! The review engine: prediction, verdicts, corrections and background retraining.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use idc_core::data::{decode_bytes, materialize, CorpusManifest, PadMode, Samples, Split};
use idc_core::metrics::{compute_metrics, confusion_matrix, MetricsReport};
use idc_core::model::{build_model, evaluate, train, CheckpointMeta, Model, TrainingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ServiceError;
use crate::protocol::{run_validation_protocol, ProtocolConfig, ValidationReport};
use crate::registry::{ModelRegistry, VersionEntry};
use crate::reviews::{now_unix, ReviewLog, ReviewRecord, Verdict};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Pending corrections required before a retrain may start.
    pub min_corrections: usize,
    pub retrain: TrainingConfig,
    pub warm_start: bool,
    pub duplication: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("idc-data"),
            min_corrections: 1,
            retrain: TrainingConfig::default(),
            warm_start: true,
            duplication: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainJob {
    pub job_id: String,
    pub status: JobStatus,
    pub corrections_included: usize,
    pub metrics_before: Option<MetricsReport>,
    pub metrics_after: Option<MetricsReport>,
    pub new_model_version: Option<String>,
    pub error: Option<String>,
    pub base_version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
}

impl RetrainJob {
    pub fn is_active(&self) -> bool {
        matches!(self.status, JobStatus::Queued | JobStatus::Running)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub version: String,
    pub parent: Option<String>,
    pub created_unix: u64,
    pub metrics: Option<MetricsReport>,
    pub pending_corrections: usize,
    pub versions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewPage {
    pub items: Vec<ReviewRecord>,
    pub total: usize,
    pub page: usize,
    pub per_page: usize,
}

/// A loaded checkpoint as served to readers; replaced wholesale on swap.
#[derive(Debug)]
pub struct ActiveModel {
    pub version: String,
    pub model: Model,
    pub meta: CheckpointMeta,
}

struct Splits {
    train: Arc<Samples>,
    test: Arc<Samples>,
}

struct Inner {
    config: ServiceConfig,
    manifest: CorpusManifest,
    registry: Mutex<ModelRegistry>,
    active: RwLock<Option<Arc<ActiveModel>>>,
    reviews: Mutex<ReviewLog>,
    jobs: Mutex<Vec<RetrainJob>>,
    splits: Mutex<Option<Arc<Splits>>>,
}

/// Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct HitlService {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for HitlService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HitlService").field("data_dir", &self.inner.config.data_dir).finish()
    }
}

fn internal(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Internal(e.to_string())
}

pub fn metrics_on(model: &Model, samples: &Samples) -> Result<MetricsReport, ServiceError> {
    let ev = evaluate(model, samples)?;
    let preds: Vec<u8> = ev.predictions.iter().map(|p| p.label).collect();
    let cm = confusion_matrix(&preds, &samples.labels).map_err(internal)?;
    compute_metrics(&cm).map_err(internal)
}

impl HitlService {
    /// Opens the data directory, restoring the review log, registry and active model.
    pub fn open(config: ServiceConfig, manifest: CorpusManifest) -> Result<Self, ServiceError> {
        let dir = &config.data_dir;
        std::fs::create_dir_all(dir.join("images")).map_err(|e| ServiceError::io(dir, e))?;
        let registry = ModelRegistry::open(&dir.join("models"))?;
        let active = match registry.active_version()? {
            Some(v) => {
                let (model, meta) = registry.load(&v)?;
                Some(Arc::new(ActiveModel { version: v, model, meta }))
            }
            None => None,
        };
        let reviews = ReviewLog::open(&dir.join("reviews.jsonl"))?;
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                manifest,
                registry: Mutex::new(registry),
                active: RwLock::new(active),
                reviews: Mutex::new(reviews),
                jobs: Mutex::new(Vec::new()),
                splits: Mutex::new(None),
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn data_dir(&self) -> &Path {
        &self.inner.config.data_dir
    }

    /// Registers `model` as a new version and makes it active.
    /// Used to seed an empty registry from a trained checkpoint.
    pub fn install(&self, model: &Model, meta: &CheckpointMeta) -> Result<String, ServiceError> {
        let splits = self.splits()?;
        let metrics = metrics_on(model, &splits.test)?;
        let mut reg = self.inner.registry.lock().unwrap();
        let parent = self.active().map(|a| a.version.clone());
        let entry = reg.register(model, meta, parent.as_deref(), Some(metrics), 0)?;
        self.swap_in(&reg, &entry)?;
        Ok(entry.version)
    }

    fn swap_in(&self, reg: &ModelRegistry, entry: &VersionEntry) -> Result<(), ServiceError> {
        reg.activate(&entry.version)?;
        let (model, meta) = reg.load(&entry.version)?;
        *self.inner.active.write().unwrap() = Some(Arc::new(ActiveModel {
            version: entry.version.clone(),
            model,
            meta,
        }));
        Ok(())
    }

    pub fn active(&self) -> Option<Arc<ActiveModel>> {
        self.inner.active.read().unwrap().clone()
    }

    fn require_active(&self) -> Result<Arc<ActiveModel>, ServiceError> {
        self.active()
            .ok_or_else(|| ServiceError::NotReady("no active model; install a checkpoint first".into()))
    }

    fn splits(&self) -> Result<Arc<Splits>, ServiceError> {
        let mut slot = self.inner.splits.lock().unwrap();
        if let Some(s) = slot.as_ref() {
            return Ok(s.clone());
        }
        let s = Arc::new(Splits {
            train: Arc::new(materialize(&self.inner.manifest, Split::Train)?),
            test: Arc::new(materialize(&self.inner.manifest, Split::Test)?),
        });
        *slot = Some(s.clone());
        Ok(s)
    }

    pub fn model_info(&self) -> Result<ModelInfo, ServiceError> {
        let active = self.require_active()?;
        let reg = self.inner.registry.lock().unwrap();
        let entry = reg.entry(&active.version).cloned();
        Ok(ModelInfo {
            version: active.version.clone(),
            parent: entry.as_ref().and_then(|e| e.parent.clone()),
            created_unix: entry.as_ref().map_or(active.meta.created_unix, |e| e.created_unix),
            metrics: entry.and_then(|e| e.metrics),
            pending_corrections: self.inner.reviews.lock().unwrap().pending_corrections().len(),
            versions: reg.versions().len(),
        })
    }

    /// Decodes an upload, predicts it with the active model and stores a pending review.
    pub fn predict_image(&self, bytes: &[u8]) -> Result<ReviewRecord, ServiceError> {
        let active = self.require_active()?;
        let pixels = decode_bytes(bytes, "upload", PadMode::Reject).map_err(|e| ServiceError::BadImage(e.to_string()))?;
        let pred = active.model.predict(&pixels).map_err(|e| ServiceError::Validation(e.to_string()))?;
        let hash: String = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
        let image_ref = format!("images/{hash}.png");
        let stored = self.data_dir().join(&image_ref);
        if !stored.exists() {
            idc_core::model::write_atomic(&stored, bytes)?;
        }
        let now = now_unix();
        let mut log = self.inner.reviews.lock().unwrap();
        let record = ReviewRecord {
            review_id: log.next_id(),
            image_ref,
            predicted_label: pred.label,
            probabilities: pred.probabilities,
            verdict: Verdict::Pending,
            corrected_label: None,
            model_version: active.version.clone(),
            created_unix: now,
            updated_unix: now,
            consumed_by: None,
        };
        log.put(record.clone())?;
        Ok(record)
    }

    pub fn review(&self, id: &str) -> Result<ReviewRecord, ServiceError> {
        self.inner
            .reviews
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("review {id} not found")))
    }

    pub fn record_feedback(
        &self,
        id: &str,
        verdict: Verdict,
        corrected_label: Option<u8>,
    ) -> Result<ReviewRecord, ServiceError> {
        let mut log = self.inner.reviews.lock().unwrap();
        let mut r = log
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("review {id} not found")))?;
        if r.verdict != Verdict::Pending {
            return Err(ServiceError::Conflict(format!("review {id} already has a verdict")));
        }
        match verdict {
            Verdict::Pending => return Err(ServiceError::Validation("verdict must be agree or disagree".into())),
            Verdict::Agree => {
                if corrected_label.is_some() {
                    return Err(ServiceError::Validation("agree takes no corrected_label".into()));
                }
            }
            Verdict::Disagree => match corrected_label {
                None => return Err(ServiceError::Validation("disagree requires corrected_label".into())),
                Some(l) if l > 1 => return Err(ServiceError::Validation(format!("corrected_label {l} is not 0 or 1"))),
                Some(l) if l == r.predicted_label => {
                    return Err(ServiceError::Validation(
                        "corrected_label must differ from the predicted label".into(),
                    ))
                }
                Some(_) => {}
            },
        }
        r.verdict = verdict;
        r.corrected_label = corrected_label;
        r.updated_unix = now_unix();
        log.put(r.clone())?;
        Ok(r)
    }

    pub fn list_reviews(&self, status: Option<Verdict>, page: usize, per_page: usize) -> ReviewPage {
        let per_page = per_page.clamp(1, 500);
        let log = self.inner.reviews.lock().unwrap();
        let matching: Vec<&ReviewRecord> = log.all().filter(|r| status.is_none_or(|s| r.verdict == s)).collect();
        let items = matching
            .iter()
            .skip(page.saturating_sub(1) * per_page)
            .take(per_page)
            .map(|r| (*r).clone())
            .collect();
        ReviewPage {
            items,
            total: matching.len(),
            page: page.max(1),
            per_page,
        }
    }

    pub fn pending_corrections(&self) -> usize {
        self.inner.reviews.lock().unwrap().pending_corrections().len()
    }

    pub fn jobs(&self) -> Vec<RetrainJob> {
        self.inner.jobs.lock().unwrap().clone()
    }

    pub fn job(&self, id: &str) -> Result<RetrainJob, ServiceError> {
        self.inner
            .jobs
            .lock()
            .unwrap()
            .iter()
            .find(|j| j.job_id == id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("retrain job {id} not found")))
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut RetrainJob)) {
        let mut jobs = self.inner.jobs.lock().unwrap();
        if let Some(j) = jobs.iter_mut().find(|j| j.job_id == id) {
            f(j);
            j.updated_unix = now_unix();
        }
    }

    /// Queues a retrain over the current pending corrections and starts it on a
    /// background thread. At most one job is queued or running at a time.
    pub fn trigger_retrain(&self) -> Result<RetrainJob, ServiceError> {
        let job = self.enqueue_retrain()?;
        let svc = self.clone();
        let id = job.job_id.clone();
        std::thread::Builder::new()
            .name(format!("retrain-{id}"))
            .spawn(move || svc.run_job(&id))
            .map_err(internal)?;
        Ok(job)
    }

    /// Like [`HitlService::trigger_retrain`] but runs the job on the calling thread.
    pub fn retrain_blocking(&self) -> Result<RetrainJob, ServiceError> {
        let job = self.enqueue_retrain()?;
        self.run_job(&job.job_id);
        self.job(&job.job_id)
    }

    fn enqueue_retrain(&self) -> Result<RetrainJob, ServiceError> {
        let active = self.require_active()?;
        let mut jobs = self.inner.jobs.lock().unwrap();
        if let Some(j) = jobs.iter().find(|j| j.is_active()) {
            return Err(ServiceError::Conflict(format!("retrain job {} is already {:?}", j.job_id, j.status)));
        }
        let pending = self.pending_corrections();
        let min = self.inner.config.min_corrections.max(1);
        if pending < min {
            return Err(ServiceError::Validation(format!(
                "{pending} pending corrections, at least {min} required"
            )));
        }
        let now = now_unix();
        let job = RetrainJob {
            job_id: format!("job-{:04}", jobs.len() + 1),
            status: JobStatus::Queued,
            corrections_included: pending,
            metrics_before: None,
            metrics_after: None,
            new_model_version: None,
            error: None,
            base_version: active.version.clone(),
            created_unix: now,
            updated_unix: now,
        };
        jobs.push(job.clone());
        Ok(job)
    }

    fn run_job(&self, id: &str) {
        self.update_job(id, |j| j.status = JobStatus::Running);
        match self.execute(id) {
            Ok(()) => {}
            Err(e) => {
                log::error!("retrain {id} failed: {e}");
                self.update_job(id, |j| {
                    j.status = JobStatus::Failed;
                    j.error = Some(e.to_string());
                });
            }
        }
    }

    fn execute(&self, id: &str) -> Result<(), ServiceError> {
        let active = self.require_active()?;
        let corrections = self.inner.reviews.lock().unwrap().pending_corrections();
        let splits = self.splits()?;

        let mut extended = (*splits.train).clone();
        let mut corrected = Samples::new(&extended.sample_shape);
        for r in &corrections {
            let path = self.data_dir().join(&r.image_ref);
            let bytes = std::fs::read(&path).map_err(|e| ServiceError::io(&path, e))?;
            let pixels = decode_bytes(&bytes, &r.image_ref, PadMode::Reject)?;
            let label = r.corrected_label.expect("disagree records carry a corrected label");
            corrected.push(r.review_id.clone(), label, pixels.data())?;
        }
        for _ in 0..self.inner.config.duplication.max(1) {
            extended.extend(&corrected)?;
        }

        let before = metrics_on(&active.model, &splits.test)?;
        self.update_job(id, |j| {
            j.metrics_before = Some(before.clone());
            j.corrections_included = corrections.len();
        });

        let job_no: u64 = id.trim_start_matches("job-").parse().unwrap_or(0);
        let base_seed = active.meta.training_config.as_ref().map_or(0, |t| t.seed);
        let training = TrainingConfig {
            seed: idc_core::data::item_seed(base_seed, &active.version, job_no as u32),
            ..self.inner.config.retrain.clone()
        };
        let mut model = if self.inner.config.warm_start {
            active.model.clone()
        } else {
            build_model(active.model.config(), training.seed)?
        };
        let outcome = train(&mut model, &extended, &splits.test, &training).map_err(internal)?;
        let after = metrics_on(&outcome.best, &splits.test)?;

        let mut meta = CheckpointMeta::new(outcome.best.config());
        meta.training_config = Some(training);
        meta.best_epoch = Some(outcome.history.best_epoch);
        meta.best_metrics = outcome.history.best().copied();
        meta.manifest_digest = active.meta.manifest_digest.clone();
        {
            let mut reg = self.inner.registry.lock().unwrap();
            let entry = reg.register(
                &outcome.best,
                &meta,
                Some(&active.version),
                Some(after.clone()),
                corrections.len(),
            )?;
            self.swap_in(&reg, &entry)?;
            self.update_job(id, |j| j.new_model_version = Some(entry.version.clone()));
        }
        {
            let mut log = self.inner.reviews.lock().unwrap();
            for r in corrections {
                let mut r = r;
                r.consumed_by = Some(id.to_string());
                r.updated_unix = now_unix();
                log.put(r)?;
            }
        }
        self.update_job(id, |j| {
            j.metrics_after = Some(after);
            j.status = JobStatus::Completed;
        });
        Ok(())
    }

    /// Waits until the job leaves the queued/running states.
    pub fn wait_for_job(&self, id: &str, timeout: std::time::Duration) -> Result<RetrainJob, ServiceError> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let job = self.job(id)?;
            if !job.is_active() {
                return Ok(job);
            }
            if std::time::Instant::now() > deadline {
                return Err(ServiceError::Internal(format!("timed out waiting for {id}")));
            }
            std::thread::sleep(std::time::Duration::from_millis(20));
        }
    }

    /// Runs the validation protocol against the active model and the manifest splits.
    pub fn run_validation(&self, cfg: &ProtocolConfig) -> Result<ValidationReport, ServiceError> {
        let active = self.require_active()?;
        let splits = self.splits()?;
        run_validation_protocol(&active.model, &splits.train, &splits.test, cfg).map_err(|e| match e {
            crate::protocol::ProtocolError::Insufficient { .. } | crate::protocol::ProtocolError::NoGroups => {
                ServiceError::Validation(e.to_string())
            }
            other => internal(other),
        })
    }
}
