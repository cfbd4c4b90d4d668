//! Environment contract and its implementations.
//!
//! [`MockEnv`] is a deterministic site simulator driven by a [`SiteSpec`];
//! the DevTools adapter (feature `cdp`) drives a real browser. [`Watchdog`]
//! wraps either one and restores lost sessions.

#[cfg(feature = "cdp")]
pub mod cdp;
mod mock;
pub mod site;
mod watchdog;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::model::{Goal, Observation};
pub use mock::{MockEnv, NOT_FOUND_TITLE};
pub use site::{Condition, Effect, ElementSpec, PageSpec, ProgrammaticCheck, Scalar, SiteSpec, Transition};
pub use watchdog::Watchdog;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("browser session lost: {0}")]
    SessionLost(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("navigation failed: {0}")]
    NavigationError(String),
    #[error("no element with bid {0:?} on the current page")]
    InvalidBid(String),
    #[error("goal {0:?} has no answer spec or validators")]
    SpecMissing(String),
    #[error("session could not be restored after {attempts} attempts: {last}")]
    Unrecoverable { attempts: u32, last: String },
    #[error("bad site spec: {0}")]
    BadSite(String),
}

impl EnvError {
    /// Errors the watchdog may recover from by reopening the session.
    pub fn is_transient(&self) -> bool {
        matches!(self, EnvError::SessionLost(_) | EnvError::Timeout(_))
    }
}

/// Outcome of one `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvResult {
    /// Whether the action changed page or state.
    pub effective: bool,
    /// URL after the step.
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Result of `calculate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EnvResult {
    /// A step that left the page untouched.
    pub fn neutral(url: impl Into<String>, note: Option<String>) -> Self {
        EnvResult { effective: false, url: url.into(), note, value: None, error: None }
    }

    pub fn changed(url: impl Into<String>) -> Self {
        EnvResult { effective: true, url: url.into(), note: None, value: None, error: None }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

/// Handles `take_note` / `calculate` without touching the page.
pub fn neutral_step(action: &Action, url: &str) -> Option<EnvResult> {
    match action {
        Action::TakeNote(_) => Some(EnvResult::neutral(url, Some("noted".into()))),
        Action::Calculate(expr) => Some(match crate::action::eval_calculate(expr) {
            Ok(v) => EnvResult { value: Some(v), ..EnvResult::neutral(url, None) },
            Err(e) => EnvResult { error: Some(e.to_string()), ..EnvResult::neutral(url, None) },
        }),
        Action::Stop(_) => Some(EnvResult::neutral(url, Some("stopped".into()))),
        _ => None,
    }
}

/// Everything evaluation needs once a session ends.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub url: String,
    pub vars: BTreeMap<String, Scalar>,
}

pub trait Environment: Send {
    fn site_id(&self) -> &str;
    fn observe(&mut self) -> Result<Observation, EnvError>;
    fn step(&mut self, action: &Action) -> Result<EnvResult, EnvError>;
    /// Restarts the browser session at its start page. Client-side state
    /// (tabs, history) is lost; server-side state survives.
    fn reopen(&mut self) -> Result<(), EnvError>;
    fn final_state(&self) -> FinalState;
    /// Parameterised URLs the agent may build directly.
    fn url_templates(&self) -> Vec<String> {
        Vec::new()
    }
    /// Step counter reported in observations.
    fn set_step(&mut self, _step: u32) {}
    /// PNG bytes of the current page, when the backend can render one.
    fn screenshot(&mut self) -> Option<Vec<u8>> {
        None
    }
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn site_id(&self) -> &str {
        (**self).site_id()
    }
    fn observe(&mut self) -> Result<Observation, EnvError> {
        (**self).observe()
    }
    fn step(&mut self, action: &Action) -> Result<EnvResult, EnvError> {
        (**self).step(action)
    }
    fn reopen(&mut self) -> Result<(), EnvError> {
        (**self).reopen()
    }
    fn final_state(&self) -> FinalState {
        (**self).final_state()
    }
    fn url_templates(&self) -> Vec<String> {
        (**self).url_templates()
    }
    fn set_step(&mut self, step: u32) {
        (**self).set_step(step)
    }
    fn screenshot(&mut self) -> Option<Vec<u8>> {
        (**self).screenshot()
    }
}

impl<E: Environment + ?Sized> Environment for &mut E {
    fn site_id(&self) -> &str {
        (**self).site_id()
    }
    fn observe(&mut self) -> Result<Observation, EnvError> {
        (**self).observe()
    }
    fn step(&mut self, action: &Action) -> Result<EnvResult, EnvError> {
        (**self).step(action)
    }
    fn reopen(&mut self) -> Result<(), EnvError> {
        (**self).reopen()
    }
    fn final_state(&self) -> FinalState {
        (**self).final_state()
    }
    fn url_templates(&self) -> Vec<String> {
        (**self).url_templates()
    }
    fn set_step(&mut self, step: u32) {
        (**self).set_step(step)
    }
    fn screenshot(&mut self) -> Option<Vec<u8>> {
        (**self).screenshot()
    }
}

/// Reference answer for information-seeking tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSpec {
    ExactMatch(String),
    MustInclude(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    AnswerBased,
    Programmatic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub success: bool,
    pub mode: EvalMode,
    pub detail: String,
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Answer-based when the goal has a reference answer, programmatic when it
/// has validators. Matching is case-insensitive on trimmed text.
pub fn evaluate_success(goal: &Goal, answer: Option<&str>, state: &FinalState) -> Result<EvalOutcome, EnvError> {
    if let Some(spec) = &goal.reference_answer {
        let Some(answer) = answer else {
            return Ok(EvalOutcome { success: false, mode: EvalMode::AnswerBased, detail: "no answer given".into() });
        };
        let got = normalize(answer);
        let (success, detail) = match spec {
            AnswerSpec::ExactMatch(want) => {
                let ok = got == normalize(want);
                (ok, if ok { "exact match".to_string() } else { format!("expected {want:?}, got {answer:?}") })
            }
            AnswerSpec::MustInclude(parts) => {
                let missing: Vec<&String> = parts.iter().filter(|p| !got.contains(&normalize(p))).collect();
                if missing.is_empty() {
                    (true, "all required fragments present".to_string())
                } else {
                    (false, format!("missing {missing:?}"))
                }
            }
        };
        return Ok(EvalOutcome { success, mode: EvalMode::AnswerBased, detail });
    }
    if goal.validators.is_empty() {
        return Err(EnvError::SpecMissing(goal.id.clone()));
    }
    let failed: Vec<&str> = goal
        .validators
        .iter()
        .filter(|v| !v.check.eval(&state.vars, &state.url))
        .map(|v| v.name.as_str())
        .collect();
    Ok(if failed.is_empty() {
        EvalOutcome { success: true, mode: EvalMode::Programmatic, detail: "all validators passed".into() }
    } else {
        EvalOutcome { success: false, mode: EvalMode::Programmatic, detail: format!("failed validators: {}", failed.join(", ")) }
    })
}
