//! Single-file job journal plus a content-addressed blob directory.
//!
//! Layout under the storage root:
//!
//! ```text
//! store.jsonl        one JSON document per line, appended
//! blobs/<sha256>     artifact bytes, named by the hex digest of their content
//! ```
//!
//! A journal line is either `{"type":"job","record":{..}}`, a full snapshot of
//! one job that replaces any earlier snapshot, or `{"type":"event","event":{..}}`.
//! A trailing line cut short by a crash is dropped on load; any other bad line
//! is an error.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use maskguide::jobspec::JobSpec;
use maskguide::pipeline::{Failure, JobMode};
use maskguide::seed::sha256_hex;
use maskguide::stage1::{LatentState, TraceRow};
use maskguide::JobStatus;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const JOURNAL_FILE: &str = "store.jsonl";
pub const BLOB_DIR: &str = "blobs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub id: String,
    /// PNG artifact id.
    pub artifact: String,
    /// Lossless f64 image blob, used to resume interactive jobs after restart.
    pub raw: String,
    pub final_loss: f64,
    pub guides: Vec<String>,
    pub loss_trace: Vec<TraceRow<f64>>,
    pub latent: LatentState<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub id: String,
    pub source: String,
    pub artifact: String,
    pub raw: String,
    pub strength: f64,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub status: JobStatus,
    pub mode: JobMode,
    /// Submitted spec with the mask and vocabulary inlined, so it resolves without the original files.
    pub spec: JobSpec,
    /// Artifact id of the submitted mask bytes.
    pub mask_artifact: String,
    #[serde(default)]
    pub stage1: Vec<Stage1Record>,
    #[serde(default)]
    pub stage2: Vec<Stage2Record>,
    #[serde(default)]
    pub failure: Option<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Status {
        status: JobStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failure: Option<Failure>,
    },
    Step {
        candidate: String,
        step: usize,
        l_clip: f64,
        l_seg: Vec<f64>,
        l_total: f64,
    },
    Stage1Ready {
        id: String,
        artifact: String,
    },
    Stage2Ready {
        id: String,
        source: String,
        artifact: String,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Status { .. } => "status",
            EventKind::Step { .. } => "step",
            EventKind::Stage1Ready { .. } => "stage1_ready",
            EventKind::Stage2Ready { .. } => "stage2_ready",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, EventKind::Status { status, .. } if status.is_terminal())
    }
}

/// One progress event; `seq` counts from 1 within its job with no gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub job_id: String,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Job { record: JobRecord },
    Event { event: JobEvent },
}

#[derive(Debug)]
pub struct JobStore {
    root: PathBuf,
    journal: File,
    jobs: HashMap<String, JobRecord>,
    /// Submission order.
    order: Vec<String>,
    events: HashMap<String, Vec<JobEvent>>,
}

impl JobStore {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join(BLOB_DIR))?;
        let path = root.join(JOURNAL_FILE);
        let mut journal = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut store = Self {
            root: root.to_path_buf(),
            journal: journal.try_clone()?,
            jobs: HashMap::new(),
            order: Vec::new(),
            events: HashMap::new(),
        };
        let good_len = store.replay(&mut journal, &path)?;
        if good_len < journal.metadata()?.len() {
            journal.set_len(good_len)?;
        }
        Ok(store)
    }

    /// Loads every complete line; returns the byte length of the valid prefix.
    fn replay(&mut self, journal: &mut File, path: &Path) -> Result<u64> {
        journal.seek(SeekFrom::Start(0))?;
        let mut reader = BufReader::new(journal);
        let mut offset = 0u64;
        let mut buf = String::new();
        let mut line_no = 0;
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf)?;
            if n == 0 {
                return Ok(offset);
            }
            line_no += 1;
            let complete = buf.ends_with('\n');
            if buf.trim().is_empty() {
                offset += n as u64;
                continue;
            }
            match serde_json::from_str::<Line>(buf.trim_end()) {
                Ok(line) if complete => {
                    self.apply(line);
                    offset += n as u64;
                }
                Ok(_) => return Ok(offset),
                Err(_) if !complete => return Ok(offset),
                Err(e) => {
                    // A bad final line with a newline can also be a torn write.
                    let mut rest = String::new();
                    reader.read_line(&mut rest)?;
                    if rest.is_empty() {
                        return Ok(offset);
                    }
                    return Err(ServiceError::Journal {
                        path: path.display().to_string(),
                        line: line_no,
                        message: e.to_string(),
                    });
                }
            }
        }
    }

    fn apply(&mut self, line: Line) {
        match line {
            Line::Job { record } => {
                if !self.jobs.contains_key(&record.id) {
                    self.order.push(record.id.clone());
                }
                self.jobs.insert(record.id.clone(), record);
            }
            Line::Event { event } => self.events.entry(event.job_id.clone()).or_default().push(event),
        }
    }

    fn append(&mut self, line: &Line) -> Result<()> {
        let mut text = serde_json::to_string(line)?;
        text.push('\n');
        self.journal.write_all(text.as_bytes())?;
        self.journal.flush()?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Inserts or replaces a job snapshot and syncs the journal.
    pub fn put_job(&mut self, record: JobRecord) -> Result<()> {
        let line = Line::Job { record };
        self.append(&line)?;
        self.journal.sync_data()?;
        self.apply(line);
        Ok(())
    }

    pub fn job(&self, id: &str) -> Option<&JobRecord> {
        self.jobs.get(id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.order.iter().filter_map(|id| self.jobs.get(id))
    }

    pub fn job_count(&self) -> usize {
        self.order.len()
    }

    /// Appends the next event for `job_id` and returns it.
    pub fn push_event(&mut self, job_id: &str, kind: EventKind) -> Result<JobEvent> {
        let seq = self.events.get(job_id).map_or(0, |e| e.len() as u64) + 1;
        let event = JobEvent {
            job_id: job_id.to_string(),
            seq,
            kind,
        };
        self.append(&Line::Event { event: event.clone() })?;
        self.events.entry(job_id.to_string()).or_default().push(event.clone());
        Ok(event)
    }

    /// Events with `seq > after`, in order.
    pub fn events_after(&self, job_id: &str, after: u64) -> &[JobEvent] {
        let all = self.events.get(job_id).map_or(&[][..], |e| e.as_slice());
        let start = (after as usize).min(all.len());
        &all[start..]
    }

    pub fn blob_path(&self, id: &str) -> Option<PathBuf> {
        is_blob_id(id).then(|| self.root.join(BLOB_DIR).join(id))
    }

    /// Stores `bytes` under their digest; an existing blob is left untouched.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<String> {
        let id = sha256_hex(bytes);
        let path = self.root.join(BLOB_DIR).join(&id);
        if !path.exists() {
            let tmp = self.root.join(BLOB_DIR).join(format!(".{id}.tmp"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(id)
    }

    pub fn get_blob(&self, id: &str) -> Result<Vec<u8>> {
        let path = self.blob_path(id).ok_or_else(|| ServiceError::not_found("artifact", id))?;
        match std::fs::read(&path) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ServiceError::not_found("artifact", id)),
            Err(e) => Err(e.into()),
        }
    }
}

pub fn is_blob_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}
