//! Job execution on top of [`JobStore`]: submission, a bounded worker pool,
//! event streaming and interactive selection.
//!
//! Each job has a single writer at a time (the task running it), so the store
//! mutex is only held for short journal appends.

use std::collections::{HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use base64::Engine;
use futures::Stream;
use maskguide::codec::{image_from_raw, image_to_png, image_to_raw};
use maskguide::jobspec::{FanOut, FieldError, JobSpec, ValidationErrors};
use maskguide::loss::DEFAULT_ALPHA_CLIP;
use maskguide::pipeline::{stage1_id, FailedStage, Failure, JobMode, JobObserver, RefineOverride};
use maskguide::stage1::TraceRow;
use maskguide::{
    run_job, select_candidates, BackendRegistry, Backends, ClassVocabulary, GenerationJob, JobStatus,
    StageOneResult, StageTwoResult,
};
use serde::{Deserialize, Serialize};
use tokio::sync::{watch, Semaphore};

use crate::config::ServiceConfig;
use crate::error::{Result, ServiceError};
use crate::store::{EventKind, JobEvent, JobRecord, JobStore, Stage1Record, Stage2Record};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submitted {
    pub id: String,
    pub status: JobStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectRequest {
    pub stage1_ids: Vec<String>,
    #[serde(default)]
    pub strength: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1View {
    pub id: String,
    pub artifact: String,
    pub final_loss: f64,
    pub guides: Vec<String>,
    pub loss_trace: Vec<TraceRow<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2View {
    pub id: String,
    pub source: String,
    pub artifact: String,
    pub strength: f64,
    pub steps: usize,
    pub seed: u64,
}

/// Job document returned by `GET /jobs/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub id: String,
    pub status: JobStatus,
    pub mode: JobMode,
    pub prompt: String,
    pub seed: u64,
    pub fan_out: FanOut,
    pub mask_artifact: String,
    pub spec: JobSpec,
    pub stage1: Vec<Stage1View>,
    pub stage2: Vec<Stage2View>,
    pub failure: Option<Failure>,
}

impl From<&JobRecord> for JobView {
    fn from(r: &JobRecord) -> Self {
        Self {
            id: r.id.clone(),
            status: r.status,
            mode: r.mode,
            prompt: r.spec.prompt.clone().unwrap_or_default(),
            seed: r.spec.seed,
            fan_out: r.spec.fan_out.clone(),
            mask_artifact: r.mask_artifact.clone(),
            spec: r.spec.clone(),
            stage1: r
                .stage1
                .iter()
                .map(|s| Stage1View {
                    id: s.id.clone(),
                    artifact: s.artifact.clone(),
                    final_loss: s.final_loss,
                    guides: s.guides.clone(),
                    loss_trace: s.loss_trace.clone(),
                })
                .collect(),
            stage2: r
                .stage2
                .iter()
                .map(|s| Stage2View {
                    id: s.id.clone(),
                    source: s.source.clone(),
                    artifact: s.artifact.clone(),
                    strength: s.strength,
                    steps: s.steps,
                    seed: s.seed,
                })
                .collect(),
            failure: r.failure.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideView {
    pub name: String,
    pub classes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defaults {
    pub alpha_clip: f64,
    pub alpha_seg: Vec<f64>,
    pub strength: f64,
    pub refine_steps: usize,
    pub max_steps: usize,
}

/// Document returned by `GET /vocab`: everything a client needs to draw a valid mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabView {
    /// Sidecar layout, `{"<id>": {"name", "color"}}`.
    pub classes: serde_json::Value,
    pub width: usize,
    pub height: usize,
    pub guides: Vec<GuideView>,
    pub defaults: Defaults,
}

struct Inner {
    config: ServiceConfig,
    backends: Backends<f64>,
    store: Mutex<JobStore>,
    notifier: watch::Sender<u64>,
    permits: Arc<Semaphore>,
    /// Interactive jobs whose selection has been accepted but whose stage 2 has not finished.
    claimed: Mutex<HashSet<String>>,
    closed: AtomicBool,
}

#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("storage_root", &self.inner.config.storage_root)
            .field("backends", &self.inner.backends)
            .finish()
    }
}

impl Service {
    /// Builds the backends named in the config and opens the store.
    pub fn open(config: ServiceConfig) -> Result<Self> {
        let vocab = config.vocabulary()?;
        let backends = BackendRegistry::with_builtins().build(&config.backends, &vocab)?;
        Self::with_backends(config, backends)
    }

    /// Opens the store and marks jobs interrupted by a previous shutdown as failed.
    pub fn with_backends(config: ServiceConfig, backends: Backends<f64>) -> Result<Self> {
        config.validate()?;
        let store = JobStore::open(&config.storage_root)?;
        let (notifier, _) = watch::channel(0);
        let service = Self {
            inner: Arc::new(Inner {
                permits: Arc::new(Semaphore::new(config.workers)),
                config,
                backends,
                store: Mutex::new(store),
                notifier,
                claimed: Mutex::new(HashSet::new()),
                closed: AtomicBool::new(false),
            }),
        };
        service.recover()?;
        Ok(service)
    }

    fn recover(&self) -> Result<()> {
        let stale: Vec<(String, JobStatus)> = {
            let store = self.inner.store();
            store
                .jobs()
                .filter(|r| match r.status {
                    JobStatus::Pending | JobStatus::Stage1Running | JobStatus::Stage2Running => true,
                    // Auto jobs continue straight into stage 2 from here.
                    JobStatus::AwaitingSelection => r.mode == JobMode::Auto,
                    JobStatus::Done | JobStatus::Failed => false,
                })
                .map(|r| (r.id.clone(), r.status))
                .collect()
        };
        for (id, status) in stale {
            self.inner.fail_job(
                &id,
                FailedStage::Interrupted,
                format!("service stopped while the job was {status}"),
            )?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn backends(&self) -> &Backends<f64> {
        &self.inner.backends
    }

    pub fn storage_root(&self) -> &Path {
        &self.inner.config.storage_root
    }

    /// Validates and persists a job as pending, then schedules it.
    pub fn submit(&self, spec: JobSpec) -> Result<Submitted> {
        let inner = &self.inner;
        let base = &inner.config.input_root;
        let job = spec
            .resolve::<f64>("", base, &inner.backends)
            .map_err(ServiceError::Validation)?;
        let mask_bytes = spec.mask_bytes(base).map_err(|e| validation("mask_path", e))?;
        let spec = normalize(spec, &mask_bytes, base)?;
        let mode = spec.mode;

        let id = {
            let mut store = inner.store();
            let id = format!("job-{:06}", store.job_count() + 1);
            let mask_artifact = store.put_blob(&mask_bytes)?;
            store.put_job(JobRecord {
                id: id.clone(),
                status: JobStatus::Pending,
                mode,
                spec,
                mask_artifact,
                stage1: Vec::new(),
                stage2: Vec::new(),
                failure: None,
            })?;
            store.push_event(
                &id,
                EventKind::Status {
                    status: JobStatus::Pending,
                    failure: None,
                },
            )?;
            id
        };
        inner.notify();

        let job = GenerationJob { id: id.clone(), ..job };
        let task_inner = self.inner.clone();
        tokio::spawn(async move {
            let job_id = job.id.clone();
            let outcome = task_inner
                .clone()
                .execute(job_id.clone(), FailedStage::Stage1, move |backends, observer| {
                    run_job(job, mode, backends, observer)
                })
                .await;
            task_inner.finish(&job_id, outcome, FailedStage::Stage1);
        });
        Ok(Submitted {
            id,
            status: JobStatus::Pending,
        })
    }

    pub fn job(&self, id: &str) -> Result<JobView> {
        self.inner
            .store()
            .job(id)
            .map(JobView::from)
            .ok_or_else(|| ServiceError::not_found("job", id))
    }

    pub fn record(&self, id: &str) -> Result<JobRecord> {
        self.inner
            .store()
            .job(id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found("job", id))
    }

    pub fn artifact(&self, id: &str) -> Result<Vec<u8>> {
        self.inner.store().get_blob(id)
    }

    pub fn vocab(&self) -> VocabView {
        let b = &self.inner.backends;
        let (width, height) = b.image_size();
        let defaults = maskguide::OptimizerConfig::<f64>::with_defaults(b.guides.len());
        let refine = maskguide::RefineConfig::<f64>::default();
        VocabView {
            classes: serde_json::from_str(&b.vocab.to_json()).expect("vocabulary json"),
            width,
            height,
            guides: b
                .guides
                .iter()
                .map(|g| GuideView {
                    name: g.name.clone(),
                    classes: g.segmenter.supported_classes().iter().copied().collect(),
                })
                .collect(),
            defaults: Defaults {
                alpha_clip: DEFAULT_ALPHA_CLIP,
                alpha_seg: defaults.weights.alpha_seg.clone(),
                strength: refine.strength,
                refine_steps: refine.steps,
                max_steps: defaults.max_steps,
            },
        }
    }

    pub fn vocabulary(&self) -> &ClassVocabulary {
        &self.inner.backends.vocab
    }

    /// Starts stage 2 for the chosen candidates of an interactive job.
    pub fn select(&self, id: &str, request: SelectRequest) -> Result<Submitted> {
        let inner = &self.inner;
        let record = self.record(id)?;
        let conflict = |expected| ServiceError::Conflict {
            id: id.to_string(),
            status: record.status.to_string(),
            expected,
        };
        if record.mode != JobMode::Interactive {
            return Err(conflict("an interactive job"));
        }
        if record.status != JobStatus::AwaitingSelection {
            return Err(conflict("awaiting_selection"));
        }

        let mut errors = Vec::new();
        if request.stage1_ids.is_empty() {
            errors.push(field_error("stage1_ids", "select at least one stage-1 candidate"));
        }
        for sid in &request.stage1_ids {
            if !record.stage1.iter().any(|s| &s.id == sid) {
                errors.push(field_error("stage1_ids", format!("unknown candidate `{sid}`")));
            }
        }
        if let Some(s) = request.strength {
            if !(0.0..=1.0).contains(&s) {
                errors.push(field_error("strength", format!("{s} outside [0, 1]")));
            }
        }
        if request.steps == Some(0) {
            errors.push(field_error("steps", "must be at least 1"));
        }
        if !errors.is_empty() {
            return Err(ServiceError::Validation(ValidationErrors { errors }));
        }

        if !inner.claimed().insert(id.to_string()) {
            return Err(ServiceError::Conflict {
                id: id.to_string(),
                status: "refining".into(),
                expected: "awaiting_selection",
            });
        }
        let job = match inner.rebuild(&record) {
            Ok(job) => job,
            Err(e) => {
                inner.claimed().remove(id);
                return Err(e);
            }
        };
        let overrides = RefineOverride {
            strength: request.strength,
            steps: request.steps,
        };
        let task_inner = self.inner.clone();
        let job_id = id.to_string();
        tokio::spawn(async move {
            let outcome = task_inner
                .clone()
                .execute(job_id.clone(), FailedStage::Stage2, move |backends, observer| {
                    select_candidates(job, &request.stage1_ids, &overrides, backends, observer)
                })
                .await;
            task_inner.finish(&job_id, outcome, FailedStage::Stage2);
            task_inner.claimed().remove(&job_id);
        });
        Ok(Submitted {
            id: id.to_string(),
            status: JobStatus::AwaitingSelection,
        })
    }

    /// Events with `seq > after`, then live events until the job reaches a
    /// terminal status or the service closes.
    pub fn events(&self, id: &str, after: u64) -> Result<impl Stream<Item = JobEvent> + Send + 'static> {
        if self.inner.store().job(id).is_none() {
            return Err(ServiceError::not_found("job", id));
        }
        let state = EventCursor {
            inner: self.inner.clone(),
            job_id: id.to_string(),
            after,
            rx: self.inner.notifier.subscribe(),
            buffered: VecDeque::new(),
            finished: false,
        };
        Ok(futures::stream::unfold(state, |mut cursor| async move {
            cursor.next().await.map(|event| (event, cursor))
        }))
    }

    /// Ends open event streams; running jobs keep going until the process exits.
    pub fn close(&self) {
        self.inner.closed.store(true, Ordering::SeqCst);
        self.inner.notify();
    }
}

struct EventCursor {
    inner: Arc<Inner>,
    job_id: String,
    after: u64,
    rx: watch::Receiver<u64>,
    buffered: VecDeque<JobEvent>,
    finished: bool,
}

impl EventCursor {
    async fn next(&mut self) -> Option<JobEvent> {
        loop {
            if let Some(event) = self.buffered.pop_front() {
                if event.kind.is_terminal() {
                    self.finished = true;
                    self.buffered.clear();
                }
                return Some(event);
            }
            if self.finished || self.inner.closed.load(Ordering::SeqCst) {
                return None;
            }
            // Mark seen before reading so a write between the read and the wait still wakes us.
            self.rx.borrow_and_update();
            let batch = self.inner.store().events_after(&self.job_id, self.after).to_vec();
            if let Some(last) = batch.last() {
                self.after = last.seq;
                self.buffered.extend(batch);
                continue;
            }
            if self.rx.changed().await.is_err() {
                return None;
            }
        }
    }
}

type Outcome = Result<GenerationJob<f64>>;

impl Inner {
    fn store(&self) -> MutexGuard<'_, JobStore> {
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn claimed(&self) -> MutexGuard<'_, HashSet<String>> {
        self.claimed.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn notify(&self) {
        self.notifier.send_modify(|n| *n = n.wrapping_add(1));
    }

    /// Runs `work` on the blocking pool once a worker slot is free.
    async fn execute<F>(self: Arc<Self>, job_id: String, stage: FailedStage, work: F) -> Outcome
    where
        F: FnOnce(&Backends<f64>, &mut dyn JobObserver<f64>) -> maskguide::Result<GenerationJob<f64>>
            + Send
            + 'static,
    {
        let _permit = self.permits.clone().acquire_owned().await.expect("semaphore is never closed");
        let inner = self.clone();
        let joined = tokio::task::spawn_blocking(move || {
            let mut observer = StoreObserver {
                inner: &inner,
                job_id,
                error: None,
            };
            let result = work(&inner.backends, &mut observer);
            match (result, observer.error) {
                (_, Some(e)) => Err(e),
                (r, None) => r.map_err(ServiceError::from),
            }
        })
        .await;
        match joined {
            Ok(outcome) => outcome,
            Err(e) => Err(ServiceError::Config(format!("{stage:?} worker panicked: {e}"))),
        }
    }

    fn finish(&self, job_id: &str, outcome: Outcome, stage: FailedStage) {
        if let Err(e) = outcome {
            let stage = match self.store().job(job_id).map(|r| r.status) {
                Some(JobStatus::Stage2Running) => FailedStage::Stage2,
                Some(JobStatus::Pending | JobStatus::Stage1Running) => FailedStage::Stage1,
                _ => stage,
            };
            // Nothing else can record the failure if the journal itself is broken.
            let _ = self.fail_job(job_id, stage, e.to_string());
        }
    }

    fn fail_job(&self, job_id: &str, stage: FailedStage, message: String) -> Result<()> {
        {
            let mut store = self.store();
            let Some(mut record) = store.job(job_id).cloned() else {
                return Ok(());
            };
            if record.status.is_terminal() {
                return Ok(());
            }
            let failure = Failure { stage, message };
            record.status = JobStatus::Failed;
            record.failure = Some(failure.clone());
            store.put_job(record)?;
            store.push_event(
                job_id,
                EventKind::Status {
                    status: JobStatus::Failed,
                    failure: Some(failure),
                },
            )?;
        }
        self.notify();
        Ok(())
    }

    /// Reconstructs an interactive job paused at `awaiting_selection` from its record.
    fn rebuild(&self, record: &JobRecord) -> Result<GenerationJob<f64>> {
        let mut job = record
            .spec
            .resolve::<f64>(&record.id, &self.config.input_root, &self.backends)
            .map_err(ServiceError::Validation)?;
        let store = self.store();
        job.stage1 = record
            .stage1
            .iter()
            .map(|s| {
                Ok(StageOneResult {
                    id: s.id.clone(),
                    image: image_from_raw(&store.get_blob(&s.raw)?)?,
                    final_loss: s.final_loss,
                    guides: s.guides.clone(),
                    loss_trace: s.loss_trace.clone(),
                    latent: s.latent.clone(),
                })
            })
            .collect::<Result<_>>()?;
        job.status = JobStatus::AwaitingSelection;
        Ok(job)
    }
}

/// Mirrors pipeline progress into the journal and blob store.
struct StoreObserver<'a> {
    inner: &'a Inner,
    job_id: String,
    error: Option<ServiceError>,
}

impl StoreObserver<'_> {
    fn record(&mut self, f: impl FnOnce(&mut JobStore, &mut JobRecord) -> Result<Option<EventKind>>) {
        if self.error.is_some() {
            return;
        }
        let outcome = {
            let mut store = self.inner.store();
            match store.job(&self.job_id).cloned() {
                None => Err(ServiceError::not_found("job", &self.job_id)),
                Some(mut record) => f(&mut store, &mut record).and_then(|event| {
                    store.put_job(record)?;
                    if let Some(event) = event {
                        store.push_event(&self.job_id, event)?;
                    }
                    Ok(())
                }),
            }
        };
        match outcome {
            Ok(()) => self.inner.notify(),
            Err(e) => self.error = Some(e),
        }
    }
}

impl JobObserver<f64> for StoreObserver<'_> {
    fn status(&mut self, status: JobStatus, failure: Option<&Failure>) {
        self.record(|_, record| {
            record.status = status;
            record.failure = failure.cloned();
            Ok(Some(EventKind::Status {
                status,
                failure: failure.cloned(),
            }))
        });
    }

    fn step(&mut self, candidate: usize, row: &TraceRow<f64>) {
        if self.error.is_some() || row.step % self.inner.config.event_cadence != 0 {
            return;
        }
        let event = EventKind::Step {
            candidate: stage1_id(candidate),
            step: row.step,
            l_clip: row.l_clip,
            l_seg: row.l_seg.clone(),
            l_total: row.l_total,
        };
        let pushed = self.inner.store().push_event(&self.job_id, event);
        match pushed {
            Ok(_) => self.inner.notify(),
            Err(e) => self.error = Some(e),
        }
    }

    fn stage1_ready(&mut self, result: &StageOneResult<f64>) {
        self.record(|store, record| {
            let artifact = store.put_blob(&image_to_png(&result.image)?)?;
            let raw = store.put_blob(&image_to_raw(&result.image))?;
            record.stage1.push(Stage1Record {
                id: result.id.clone(),
                artifact: artifact.clone(),
                raw,
                final_loss: result.final_loss,
                guides: result.guides.clone(),
                loss_trace: result.loss_trace.clone(),
                latent: result.latent.clone(),
            });
            Ok(Some(EventKind::Stage1Ready {
                id: result.id.clone(),
                artifact,
            }))
        });
    }

    fn stage2_ready(&mut self, result: &StageTwoResult<f64>) {
        self.record(|store, record| {
            let artifact = store.put_blob(&image_to_png(&result.image)?)?;
            let raw = store.put_blob(&image_to_raw(&result.image))?;
            record.stage2.push(Stage2Record {
                id: result.id.clone(),
                source: result.source.clone(),
                artifact: artifact.clone(),
                raw,
                strength: result.config.strength,
                steps: result.config.steps,
                seed: result.config.seed,
            });
            Ok(Some(EventKind::Stage2Ready {
                id: result.id.clone(),
                source: result.source.clone(),
                artifact,
            }))
        });
    }
}

fn field_error(field: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

fn validation(field: &str, message: impl Into<String>) -> ServiceError {
    ServiceError::Validation(ValidationErrors {
        errors: vec![field_error(field, message)],
    })
}

/// Inlines the mask and vocabulary so the stored spec no longer depends on input files.
fn normalize(mut spec: JobSpec, mask_bytes: &[u8], base: &Path) -> Result<JobSpec> {
    spec.mask_png_base64 = Some(base64::engine::general_purpose::STANDARD.encode(mask_bytes));
    spec.mask_path = None;
    if let Some(path) = spec.vocab_path.take() {
        if spec.vocab.is_none() {
            let full: PathBuf = base.join(path);
            spec.vocab = Some(ClassVocabulary::from_json(&std::fs::read_to_string(full)?)?);
        }
    }
    Ok(spec)
}
