//! Two-stage orchestration with seed fan-out.
//!
//! Stage-1 candidate `i` uses seed `base + i`; its stage-2 refinement `j` uses
//! `hash64(base, i, j)`. Jobs move through
//! `pending → stage1_running → awaiting_selection → stage2_running → done`,
//! or to `failed` from any non-terminal state. Auto mode passes through
//! `awaiting_selection` and selects every candidate itself.

use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::scalar::Scalar;
use crate::seed::hash64;
use crate::stage1::{optimize_with, OptimizerConfig, StageOneResult, TraceRow};
use crate::stage2::{refine, RefineConfig, StageTwoResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Stage1Running,
    AwaitingSelection,
    Stage2Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }

    pub fn is_running(self) -> bool {
        matches!(self, JobStatus::Stage1Running | JobStatus::Stage2Running)
    }

    /// Whether `self → next` is a legal transition.
    pub fn can_advance_to(self, next: JobStatus) -> bool {
        use JobStatus::*;
        match (self, next) {
            (s, Failed) => !s.is_terminal(),
            (Pending, Stage1Running)
            | (Stage1Running, AwaitingSelection)
            | (AwaitingSelection, Stage2Running)
            | (Stage2Running, Done) => true,
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Pending => "pending",
            JobStatus::Stage1Running => "stage1_running",
            JobStatus::AwaitingSelection => "awaiting_selection",
            JobStatus::Stage2Running => "stage2_running",
            JobStatus::Done => "done",
            JobStatus::Failed => "failed",
        }
    }
}

impl std::fmt::Display for JobStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobMode {
    #[default]
    Auto,
    Interactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailedStage {
    Stage1,
    Stage2,
    Interrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: FailedStage,
    pub message: String,
}

/// Refinement settings a human may change when picking candidates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineOverride {
    #[serde(default)]
    pub strength: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GenerationJob<T: Scalar> {
    pub id: String,
    pub prompt: String,
    pub target: SegMask<T>,
    pub optimizer_config: OptimizerConfig<T>,
    /// Strength and step budget; the seed is derived per refinement.
    pub refine_config: RefineConfig<T>,
    pub seed: u64,
    pub n_stage1: usize,
    pub n_stage2_per_stage1: usize,
    pub status: JobStatus,
    pub stage1: Vec<StageOneResult<T>>,
    pub stage2: Vec<StageTwoResult<T>>,
    pub failure: Option<Failure>,
}

/// Progress hooks; every method defaults to doing nothing.
pub trait JobObserver<T: Scalar> {
    fn status(&mut self, _status: JobStatus, _failure: Option<&Failure>) {}
    fn step(&mut self, _candidate: usize, _row: &TraceRow<T>) {}
    fn stage1_ready(&mut self, _result: &StageOneResult<T>) {}
    fn stage2_ready(&mut self, _result: &StageTwoResult<T>) {}
}

impl<T: Scalar> JobObserver<T> for () {}

pub fn stage1_seed(base: u64, candidate: usize) -> u64 {
    base.wrapping_add(candidate as u64)
}

pub fn stage2_seed(base: u64, candidate: usize, refinement: usize) -> u64 {
    hash64(&[base, candidate as u64, refinement as u64])
}

pub fn stage1_id(candidate: usize) -> String {
    format!("s1-{candidate}")
}

pub fn stage2_id(candidate: usize, refinement: usize) -> String {
    format!("s2-{candidate}-{refinement}")
}

impl<T: Scalar> GenerationJob<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        prompt: impl Into<String>,
        target: SegMask<T>,
        optimizer_config: OptimizerConfig<T>,
        refine_config: RefineConfig<T>,
        seed: u64,
        n_stage1: usize,
        n_stage2_per_stage1: usize,
    ) -> Result<Self> {
        if n_stage1 == 0 || n_stage2_per_stage1 == 0 {
            return Err(Error::Config("fan-out counts must be positive".into()));
        }
        optimizer_config.validate()?;
        refine_config.validate()?;
        Ok(Self {
            id: id.into(),
            prompt: prompt.into(),
            target,
            optimizer_config,
            refine_config,
            seed,
            n_stage1,
            n_stage2_per_stage1,
            status: JobStatus::Pending,
            stage1: Vec::new(),
            stage2: Vec::new(),
            failure: None,
        })
    }

    pub fn advance(&mut self, next: JobStatus, observer: &mut dyn JobObserver<T>) -> Result<()> {
        if !self.status.can_advance_to(next) {
            return Err(Error::InvalidState {
                expected: format!("a state preceding {next}"),
                actual: self.status.to_string(),
            });
        }
        self.status = next;
        observer.status(next, self.failure.as_ref());
        Ok(())
    }

    pub fn fail(&mut self, stage: FailedStage, message: impl Into<String>, observer: &mut dyn JobObserver<T>) {
        self.failure = Some(Failure {
            stage,
            message: message.into(),
        });
        if !self.status.is_terminal() {
            self.status = JobStatus::Failed;
            observer.status(JobStatus::Failed, self.failure.as_ref());
        }
    }

    pub fn stage1_by_id(&self, id: &str) -> Option<(usize, &StageOneResult<T>)> {
        self.stage1.iter().enumerate().find(|(_, r)| r.id == id)
    }

    /// Stage-2 results descending from the given stage-1 candidate.
    pub fn children_of<'a>(&'a self, stage1_id: &'a str) -> impl Iterator<Item = &'a StageTwoResult<T>> + 'a {
        self.stage2.iter().filter(move |r| r.source == stage1_id)
    }
}

/// Runs stage 1 for every candidate; auto mode continues into stage 2 for all of them.
///
/// Stage failures do not return `Err`: the job comes back `failed` with the
/// completed results kept.
pub fn run_job<T: Scalar>(
    mut job: GenerationJob<T>,
    mode: JobMode,
    backends: &Backends<T>,
    observer: &mut dyn JobObserver<T>,
) -> Result<GenerationJob<T>> {
    if job.status != JobStatus::Pending {
        return Err(Error::InvalidState {
            expected: JobStatus::Pending.to_string(),
            actual: job.status.to_string(),
        });
    }
    job.advance(JobStatus::Stage1Running, observer)?;
    for i in 0..job.n_stage1 {
        let mut config = job.optimizer_config.clone();
        config.seed = stage1_seed(job.seed, i);
        let outcome = optimize_with(&job.prompt, &job.target, backends, &config, &mut |row| {
            observer.step(i, row)
        });
        match outcome {
            Ok(mut result) => {
                result.id = stage1_id(i);
                observer.stage1_ready(&result);
                job.stage1.push(result);
            }
            Err(e) => {
                job.fail(FailedStage::Stage1, format!("candidate {i}: {e}"), observer);
                return Ok(job);
            }
        }
    }
    job.advance(JobStatus::AwaitingSelection, observer)?;
    match mode {
        JobMode::Interactive => Ok(job),
        JobMode::Auto => {
            let all: Vec<String> = job.stage1.iter().map(|r| r.id.clone()).collect();
            select_candidates(job, &all, &RefineOverride::default(), backends, observer)
        }
    }
}

/// Refines the chosen stage-1 candidates, each `n_stage2_per_stage1` times.
pub fn select_candidates<T: Scalar>(
    mut job: GenerationJob<T>,
    stage1_ids: &[String],
    overrides: &RefineOverride,
    backends: &Backends<T>,
    observer: &mut dyn JobObserver<T>,
) -> Result<GenerationJob<T>> {
    if job.status != JobStatus::AwaitingSelection {
        return Err(Error::InvalidState {
            expected: JobStatus::AwaitingSelection.to_string(),
            actual: job.status.to_string(),
        });
    }
    if stage1_ids.is_empty() {
        return Err(Error::Config("select at least one stage-1 candidate".into()));
    }
    let mut chosen = Vec::with_capacity(stage1_ids.len());
    for id in stage1_ids {
        let (index, _) = job
            .stage1_by_id(id)
            .ok_or_else(|| Error::UnknownCandidate(id.clone()))?;
        if !chosen.contains(&index) {
            chosen.push(index);
        }
    }
    chosen.sort_unstable();
    let mut base = job.refine_config.clone();
    if let Some(s) = overrides.strength {
        base.strength = T::lit(s);
    }
    if let Some(steps) = overrides.steps {
        base.steps = steps;
    }
    base.validate()?;

    job.advance(JobStatus::Stage2Running, observer)?;
    for &i in &chosen {
        for j in 0..job.n_stage2_per_stage1 {
            let config = RefineConfig {
                seed: stage2_seed(job.seed, i, j),
                ..base.clone()
            };
            let source = &job.stage1[i];
            match refine(&source.image, &source.id, &job.prompt, &config, backends.refiner.as_ref()) {
                Ok(mut result) => {
                    result.id = stage2_id(i, j);
                    observer.stage2_ready(&result);
                    job.stage2.push(result);
                }
                Err(e) => {
                    job.fail(FailedStage::Stage2, format!("candidate {i} refinement {j}: {e}"), observer);
                    return Ok(job);
                }
            }
        }
    }
    job.advance(JobStatus::Done, observer)?;
    Ok(job)
}
