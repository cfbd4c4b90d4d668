//! The append-only trajectory log and its line-delimited persistence.
//!
//! Every record on disk is `{"v":1,"step":..,"phase":..,"ts":..,"payload":{..}}`,
//! one per line, flushed as soon as it is appended.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::ActionDecision;
use crate::akb::RetrievedKnowledge;
use crate::env::EnvResult;
use crate::model::{AblationMode, Goal, Observation};
use crate::summarizer::BeliefState;
use crate::trigger::TriggerVerdict;
use crate::{Error, Result};

pub const TRACE_VERSION: u32 = 1;

/// Loop phase. Declaration order is the order phases must appear in within a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Observe,
    Retrieve,
    Summarize,
    Act,
    EnvStep,
    Trigger,
}

impl Phase {
    pub fn rank(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Success,
    Failure,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActFailureKind {
    Parse,
    Grounding,
}

/// What the operator produced at a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ActRecord {
    Decided {
        decision: ActionDecision,
        retry_count: u32,
    },
    Failed {
        failure: ActFailureKind,
        detail: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        raw: Option<String>,
        retry_count: u32,
    },
}

impl ActRecord {
    pub fn decision(&self) -> Option<&ActionDecision> {
        match self {
            ActRecord::Decided { decision, .. } => Some(decision),
            ActRecord::Failed { .. } => None,
        }
    }

    pub fn retry_count(&self) -> u32 {
        match self {
            ActRecord::Decided { retry_count, .. } | ActRecord::Failed { retry_count, .. } => *retry_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Observation(Observation),
    Retrieved(RetrievedKnowledge),
    Belief(BeliefState),
    /// Raw recent-history window used in place of a belief state when the
    /// summarizer is ablated.
    HistoryDigest { text: String },
    Act(ActRecord),
    EnvResult(EnvResult),
    Trigger(TriggerVerdict),
}

impl Payload {
    pub fn phase(&self) -> Phase {
        match self {
            Payload::Observation(_) => Phase::Observe,
            Payload::Retrieved(_) => Phase::Retrieve,
            Payload::Belief(_) | Payload::HistoryDigest { .. } => Phase::Summarize,
            Payload::Act(_) => Phase::Act,
            Payload::EnvResult(_) => Phase::EnvStep,
            Payload::Trigger(_) => Phase::Trigger,
        }
    }
}

/// One record of the log. The phase is always derived from the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EventRecord", into = "EventRecord")]
pub struct TraceEvent {
    pub step: u32,
    pub ts: u64,
    pub payload: Payload,
}

impl TraceEvent {
    pub fn new(step: u32, ts: u64, payload: Payload) -> Self {
        TraceEvent { step, ts, payload }
    }

    pub fn phase(&self) -> Phase {
        self.payload.phase()
    }

    fn key(&self) -> (u32, u8) {
        (self.step, self.phase().rank())
    }
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    v: u32,
    step: u32,
    phase: Phase,
    ts: u64,
    payload: Payload,
}

impl From<TraceEvent> for EventRecord {
    fn from(ev: TraceEvent) -> Self {
        EventRecord {
            v: TRACE_VERSION,
            step: ev.step,
            phase: ev.payload.phase(),
            ts: ev.ts,
            payload: ev.payload,
        }
    }
}

impl TryFrom<EventRecord> for TraceEvent {
    type Error = String;

    fn try_from(r: EventRecord) -> std::result::Result<Self, Self::Error> {
        if r.v != TRACE_VERSION {
            return Err(format!("unsupported trace record version {}", r.v));
        }
        if r.payload.phase() != r.phase {
            return Err(format!("payload kind does not match phase {:?}", r.phase));
        }
        Ok(TraceEvent { step: r.step, ts: r.ts, payload: r.payload })
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrajectoryError {
    #[error("event {phase:?}@{step} does not follow {last_phase:?}@{last_step}")]
    OrderViolation {
        step: u32,
        phase: Phase,
        last_step: u32,
        last_phase: Phase,
    },
    #[error("act event at step {step} follows a stop action")]
    AfterStop { step: u32 },
    #[error("trajectory is no longer running (status {0:?})")]
    Terminal(RunStatus),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub goal_id: String,
    events: Vec<TraceEvent>,
    status: RunStatus,
}

impl Trajectory {
    pub fn new(goal_id: impl Into<String>) -> Self {
        Trajectory { goal_id: goal_id.into(), events: Vec::new(), status: RunStatus::Running }
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Appends `ev` if it keeps the log strictly ordered by `(step, phase)`.
    pub fn append_event(&mut self, ev: TraceEvent) -> Result<(), TrajectoryError> {
        if self.status != RunStatus::Running {
            return Err(TrajectoryError::Terminal(self.status));
        }
        if let Some(last) = self.events.last() {
            if ev.key() <= last.key() {
                return Err(TrajectoryError::OrderViolation {
                    step: ev.step,
                    phase: ev.phase(),
                    last_step: last.step,
                    last_phase: last.phase(),
                });
            }
        }
        if ev.phase() == Phase::Act && self.stopped() {
            return Err(TrajectoryError::AfterStop { step: ev.step });
        }
        self.events.push(ev);
        Ok(())
    }

    /// Marks the run finished. Further appends fail with `Terminal`.
    pub fn finish(&mut self, status: RunStatus) {
        self.status = status;
    }

    /// Whether a stop action has been recorded.
    pub fn stopped(&self) -> bool {
        self.acts().any(|(_, rec)| rec.decision().is_some_and(|d| d.action.is_stop()))
    }

    pub fn acts(&self) -> impl Iterator<Item = (u32, &ActRecord)> {
        self.events.iter().filter_map(|e| match &e.payload {
            Payload::Act(rec) => Some((e.step, rec)),
            _ => None,
        })
    }

    pub fn observation_at(&self, step: u32) -> Option<&Observation> {
        self.events.iter().find_map(|e| match &e.payload {
            Payload::Observation(o) if e.step == step => Some(o),
            _ => None,
        })
    }

    pub fn beliefs(&self) -> impl Iterator<Item = &BeliefState> {
        self.events.iter().filter_map(|e| match &e.payload {
            Payload::Belief(b) => Some(b),
            _ => None,
        })
    }

    pub fn trigger(&self) -> Option<&TriggerVerdict> {
        self.events.iter().rev().find_map(|e| match &e.payload {
            Payload::Trigger(v) => Some(v),
            _ => None,
        })
    }

    /// Number of steps that produced an act event.
    pub fn act_count(&self) -> usize {
        self.acts().count()
    }

    /// Rebuilds a trajectory by replaying `events` through `append_event`.
    pub fn replay(goal_id: impl Into<String>, events: impl IntoIterator<Item = TraceEvent>) -> Result<Self, TrajectoryError> {
        let mut t = Trajectory::new(goal_id);
        for ev in events {
            t.append_event(ev)?;
        }
        Ok(t)
    }
}

/// Checks that `events` are in strict `(step, phase)` order with no act after a stop.
pub fn validate_phase_order(events: &[TraceEvent]) -> Result<(), TrajectoryError> {
    Trajectory::replay("", events.iter().cloned()).map(|_| ())
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Monotone counter; makes persisted logs byte-reproducible.
#[derive(Default)]
pub struct TickClock(AtomicU64);

impl Clock for TickClock {
    fn now_ms(&self) -> u64 {
        self.0.fetch_add(1, Ordering::Relaxed)
    }
}

/// Summary stored next to each trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub v: u32,
    pub run_id: String,
    pub goal: Goal,
    pub site_id: String,
    pub mode: AblationMode,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

/// Writes one run directory: `trajectory.jsonl`, `meta.json` and `screenshots/`.
pub struct TrajectoryWriter {
    dir: PathBuf,
    out: BufWriter<File>,
}

impl TrajectoryWriter {
    pub const FILE: &'static str = "trajectory.jsonl";

    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(Self::FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(true)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(TrajectoryWriter { dir, out: BufWriter::new(file) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, ev: &TraceEvent) -> Result<()> {
        let path = self.dir.join(Self::FILE);
        serde_json::to_writer(&mut self.out, ev).map_err(|e| Error::json(&path, e))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        self.out.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn write_meta(&self, meta: &RunMeta) -> Result<()> {
        crate::write_json_atomic(&self.dir.join("meta.json"), meta)
    }

    pub fn screenshots(&self) -> ScreenshotStore {
        ScreenshotStore::new(self.dir.join("screenshots"))
    }
}

pub fn serialize_event(ev: &TraceEvent) -> String {
    serde_json::to_string(ev).expect("trace events always serialize")
}

pub fn read_events(path: &Path) -> Result<Vec<TraceEvent>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

/// Content-addressed image blobs kept beside a trajectory.
#[derive(Debug, Clone)]
pub struct ScreenshotStore {
    dir: PathBuf,
}

impl ScreenshotStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ScreenshotStore { dir: dir.into() }
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let hash = hex::encode(Sha256::digest(bytes));
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(format!("{hash}.png"));
        if !path.exists() {
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::NotFound(format!("screenshot {hash}")));
        }
        let path = self.dir.join(format!("{hash}.png"));
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("screenshot {hash}")),
            _ => Error::io(&path, e),
        })
    }
}

/// Read-only view over a `runs/` directory.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(Error::NotFound(format!("run {run_id}")));
        }
        let dir = self.root.join(run_id);
        if !dir.is_dir() {
            return Err(Error::NotFound(format!("run {run_id}")));
        }
        Ok(dir)
    }

    pub fn list(&self) -> Result<Vec<RunMeta>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(&self.root, e)),
        };
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let meta = entry.path().join("meta.json");
            if meta.is_file() {
                out.push(crate::read_json(&meta)?);
            }
        }
        out.sort_by(|a: &RunMeta, b| a.run_id.cmp(&b.run_id));
        Ok(out)
    }

    pub fn meta(&self, run_id: &str) -> Result<RunMeta> {
        crate::read_json(&self.run_dir(run_id)?.join("meta.json"))
    }

    pub fn events(&self, run_id: &str) -> Result<Vec<TraceEvent>> {
        read_events(&self.run_dir(run_id)?.join(TrajectoryWriter::FILE))
    }

    pub fn screenshots(&self, run_id: &str) -> Result<ScreenshotStore> {
        Ok(ScreenshotStore::new(self.run_dir(run_id)?.join("screenshots")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Action;
    use crate::env::EnvResult;

    fn obs(step: u32) -> TraceEvent {
        let o = Observation::new(step, "http://h/p", "tree", vec![]).unwrap();
        TraceEvent::new(step, 0, Payload::Observation(o))
    }

    fn act(step: u32, action: Action) -> TraceEvent {
        let decision = ActionDecision { think: String::new(), raw: action.to_string(), action };
        TraceEvent::new(step, 0, Payload::Act(ActRecord::Decided { decision, retry_count: 0 }))
    }

    #[test]
    fn append_to_empty() {
        let mut t = Trajectory::new("g");
        t.append_event(obs(0)).unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn act_before_retrieve_rejected() {
        let mut t = Trajectory::new("g");
        t.append_event(obs(0)).unwrap();
        t.append_event(act(0, Action::GoBack)).unwrap();
        let retrieve = TraceEvent::new(0, 0, Payload::Retrieved(RetrievedKnowledge::empty("http://h/p")));
        let err = t.append_event(retrieve).unwrap_err();
        assert!(matches!(err, TrajectoryError::OrderViolation { phase: Phase::Retrieve, .. }));
    }

    #[test]
    fn duplicate_phase_rejected() {
        let mut t = Trajectory::new("g");
        t.append_event(obs(0)).unwrap();
        assert!(t.append_event(obs(0)).is_err());
        assert!(t.append_event(obs(1)).is_ok());
    }

    #[test]
    fn terminal_rejects_appends() {
        let mut t = Trajectory::new("g");
        t.finish(RunStatus::Failure);
        assert_eq!(t.append_event(obs(0)), Err(TrajectoryError::Terminal(RunStatus::Failure)));
    }

    #[test]
    fn nothing_acts_after_stop() {
        let mut t = Trajectory::new("g");
        t.append_event(act(0, Action::Stop(None))).unwrap();
        t.append_event(obs(1)).unwrap();
        assert_eq!(t.append_event(act(1, Action::GoBack)), Err(TrajectoryError::AfterStop { step: 1 }));
    }

    #[test]
    fn record_schema_and_phase_check() {
        let ev = TraceEvent::new(3, 17, Payload::EnvResult(EnvResult::neutral("http://h/", None)));
        let line = serialize_event(&ev);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["v"], 1);
        assert_eq!(v["step"], 3);
        assert_eq!(v["phase"], "env_step");
        assert_eq!(v["ts"], 17);
        assert_eq!(v["payload"]["kind"], "env_result");
        let back: TraceEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(back, ev);

        let forged = line.replace("\"env_step\"", "\"observe\"");
        assert!(serde_json::from_str::<TraceEvent>(&forged).is_err());
    }

    #[test]
    fn screenshots_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = ScreenshotStore::new(dir.path());
        let h1 = store.put(b"png-bytes").unwrap();
        let h2 = store.put(b"png-bytes").unwrap();
        assert_eq!(h1, h2);
        assert_eq!(store.get(&h1).unwrap(), b"png-bytes");
        assert!(matches!(store.get("../etc"), Err(Error::NotFound(_))));
    }

    #[test]
    fn writer_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = TrajectoryWriter::create(dir.path().join("r1")).unwrap();
        let events = vec![obs(0), act(0, Action::Click("1773".into())), obs(1)];
        for e in &events {
            w.write(e).unwrap();
        }
        let back = read_events(&dir.path().join("r1").join(TrajectoryWriter::FILE)).unwrap();
        assert_eq!(back, events);
    }
}
