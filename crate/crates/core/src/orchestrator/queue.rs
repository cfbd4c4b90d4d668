use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::model::Goal;
use crate::trigger::TriggerVerdict;
use crate::{Error, Result};

pub const QUEUE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStatus {
    Open,
    Resolved,
}

/// How an expert closed a failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    #[serde(default)]
    pub tip_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerun_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerun_success: Option<bool>,
    #[serde(default)]
    pub note: String,
    pub resolved_at: String,
}

/// A failed run awaiting expert review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub id: String,
    pub run_id: String,
    pub goal: Goal,
    pub site_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    pub verdict: TriggerVerdict,
    pub status: FailureStatus,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Resolution>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct QueueDocument {
    v: u32,
    next_id: u64,
    entries: Vec<FailureEntry>,
}

/// The expert queue, persisted as one JSON document.
///
/// Every operation re-reads the file and every mutation atomically replaces
/// it, all under one lock, so a runner and the service can share a single
/// instance. Separate processes see each other's writes but are not
/// serialized against each other.
pub struct FailureQueue {
    path: Option<PathBuf>,
    state: Mutex<QueueDocument>,
}

fn unavailable(e: Error) -> Error {
    match e {
        Error::QueueUnavailable(_) => e,
        other => Error::QueueUnavailable(other.to_string()),
    }
}

impl FailureQueue {
    /// Opens (or creates on first write) the queue stored at `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let doc = Self::load(&path)?;
        Ok(FailureQueue { path: Some(path), state: Mutex::new(doc) })
    }

    pub fn in_memory() -> Self {
        FailureQueue { path: None, state: Mutex::new(QueueDocument { v: QUEUE_VERSION, ..QueueDocument::default() }) }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn load(path: &Path) -> Result<QueueDocument> {
        if !path.exists() {
            return Ok(QueueDocument { v: QUEUE_VERSION, ..QueueDocument::default() });
        }
        let doc: QueueDocument = crate::read_json(path).map_err(unavailable)?;
        if doc.v != QUEUE_VERSION {
            return Err(Error::QueueUnavailable(format!("{}: unsupported queue version {}", path.display(), doc.v)));
        }
        Ok(doc)
    }

    fn with<T>(&self, mutate: bool, f: impl FnOnce(&mut QueueDocument) -> Result<T>) -> Result<T> {
        let mut guard = self.state.lock().map_err(|_| Error::QueueUnavailable("queue lock poisoned".into()))?;
        if let Some(path) = &self.path {
            *guard = Self::load(path)?;
        }
        let out = f(&mut guard)?;
        if mutate {
            if let Some(path) = &self.path {
                crate::write_json_atomic(path, &*guard).map_err(unavailable)?;
            }
        }
        Ok(out)
    }

    pub fn enqueue(
        &self,
        run_id: &str,
        goal: &Goal,
        site_id: &str,
        task_id: Option<&str>,
        verdict: &TriggerVerdict,
    ) -> Result<FailureEntry> {
        self.with(true, |doc| {
            doc.next_id += 1;
            let entry = FailureEntry {
                id: format!("f{:04}", doc.next_id),
                run_id: run_id.to_string(),
                goal: goal.clone(),
                site_id: site_id.to_string(),
                task_id: task_id.map(str::to_string),
                verdict: verdict.clone(),
                status: FailureStatus::Open,
                created_at: chrono::Utc::now().to_rfc3339(),
                resolution: None,
            };
            doc.entries.push(entry.clone());
            Ok(entry)
        })
    }

    pub fn list(&self) -> Result<Vec<FailureEntry>> {
        self.with(false, |doc| Ok(doc.entries.clone()))
    }

    pub fn open_entries(&self) -> Result<Vec<FailureEntry>> {
        Ok(self.list()?.into_iter().filter(|e| e.status == FailureStatus::Open).collect())
    }

    pub fn get(&self, id: &str) -> Result<FailureEntry> {
        self.with(false, |doc| {
            doc.entries.iter().find(|e| e.id == id).cloned().ok_or_else(|| Error::NotFound(format!("failure {id}")))
        })
    }

    /// Marks a failure resolved. Resolving twice replaces the resolution.
    pub fn resolve(&self, id: &str, mut resolution: Resolution) -> Result<FailureEntry> {
        if resolution.resolved_at.is_empty() {
            resolution.resolved_at = chrono::Utc::now().to_rfc3339();
        }
        self.with(true, |doc| {
            let entry = doc.entries.iter_mut().find(|e| e.id == id).ok_or_else(|| Error::NotFound(format!("failure {id}")))?;
            entry.status = FailureStatus::Resolved;
            entry.resolution = Some(resolution);
            Ok(entry.clone())
        })
    }
}
