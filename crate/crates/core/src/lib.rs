//! Knowledge-guided browser agent runtime.
//!
//! The online loop is observe → retrieve → summarize → act → step, with a
//! failure trigger checked at the end of every step:
//!
//! - [`akb`] stores expert tips and retrieves them through a URL → keyword →
//!   embedding cascade.
//! - [`summarizer`] keeps a size-bounded belief state and checks recent actions
//!   against tip guards.
//! - [`operator`] renders the policy prompt, queries the model and grounds the
//!   returned action against the current page.
//! - [`trigger`] decides when a run has failed and should be routed to an expert.
//! - [`env`] provides the deterministic mock site, the DevTools adapter, the
//!   session watchdog and success evaluation.
//! - [`orchestrator`] wires everything into single runs, the expert adaptation
//!   loop and the benchmark harness.

pub mod action;
pub mod akb;
pub mod env;
pub mod llm;
pub mod model;
pub mod operator;
pub mod orchestrator;
pub mod par;
pub mod summarizer;
pub mod trace;
pub mod trigger;

use std::path::PathBuf;

use thiserror::Error;

pub use action::{Action, ActionDecision};
pub use akb::{AkbStore, KnowledgeBase, KnowledgeTip, RetrievedKnowledge};
pub use model::{AblationMode, Goal, Mark, Observation, RunConfig};
pub use summarizer::BeliefState;
pub use trace::{Phase, RunStatus, TraceEvent, Trajectory};
pub use trigger::TriggerVerdict;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Trajectory(#[from] trace::TrajectoryError),
    #[error(transparent)]
    Akb(#[from] akb::AkbError),
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Llm(#[from] llm::LlmError),
    #[error(transparent)]
    Summarizer(#[from] summarizer::SummarizerError),
    #[error(transparent)]
    Operator(#[from] operator::OperatorError),
    #[error("evaluation protocol violation: {0}")]
    Protocol(String),
    #[error("failure queue unavailable: {0}")]
    QueueUnavailable(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed document {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Serializes `value` as pretty JSON and atomically replaces `path` with it.
pub(crate) fn write_json_atomic<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    use std::io::Write;

    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    serde_json::to_writer_pretty(&mut tmp, value).map_err(|e| Error::json(path, e))?;
    tmp.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
