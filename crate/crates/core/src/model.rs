//! Shared domain types: goals, observations and run configuration.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{AnswerSpec, ProgrammaticCheck};
use crate::trigger::TriggerConfig;
use crate::Error;

/// A task handed to the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_hint: Option<String>,
    /// Answer check for information-seeking tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<AnswerSpec>,
    /// State checks for interaction tasks. Ignored when `reference_answer` is set.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub validators: Vec<ProgrammaticCheck>,
}

impl Goal {
    pub fn new(id: impl Into<String>, instruction: impl Into<String>) -> Self {
        Goal {
            id: id.into(),
            instruction: instruction.into(),
            site_hint: None,
            reference_answer: None,
            validators: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.instruction.trim().is_empty() {
            return Err(Error::InvalidInput(format!("goal {:?} has an empty instruction", self.id)));
        }
        if self.id.is_empty() {
            return Err(Error::InvalidInput("goal id is empty".into()));
        }
        Ok(())
    }
}

/// One set-of-marks entry: an interactive element addressable by `bid`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mark {
    pub bid: String,
    pub role: String,
    pub name: String,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_true() -> bool {
    true
}

/// A snapshot of the page the agent is looking at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub step: u32,
    pub url: String,
    pub ax_tree: String,
    pub marks: Vec<Mark>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot_ref: Option<String>,
    pub page_fingerprint: String,
}

impl Observation {
    /// Builds an observation, computing the fingerprint and rejecting duplicate bids.
    pub fn new(step: u32, url: impl Into<String>, ax_tree: impl Into<String>, marks: Vec<Mark>) -> Result<Self, Error> {
        let url = url.into();
        let ax_tree = ax_tree.into();
        let mut seen = HashSet::with_capacity(marks.len());
        for m in &marks {
            if !seen.insert(m.bid.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate bid {:?} in observation of {url}", m.bid)));
            }
        }
        let page_fingerprint = fingerprint(&url, &ax_tree);
        Ok(Observation {
            step,
            url,
            ax_tree,
            marks,
            screenshot_ref: None,
            page_fingerprint,
        })
    }

    pub fn has_bid(&self, bid: &str) -> bool {
        self.marks.iter().any(|m| m.bid == bid)
    }

    /// Cuts the accessibility tree to at most `max_chars` characters, keeping the head.
    ///
    /// The fingerprint is left untouched so loop detection sees the full page.
    pub fn truncate_ax_tree(&mut self, max_chars: usize) {
        if let Some((idx, _)) = self.ax_tree.char_indices().nth(max_chars) {
            self.ax_tree.truncate(idx);
            self.ax_tree.push_str("\n[... truncated]");
        }
    }
}

/// Content digest of a page state. Length-prefixing keeps `("ab", "c")` and
/// `("a", "bc")` apart.
pub fn fingerprint(url: &str, ax_tree: &str) -> String {
    let mut h = Sha256::new();
    h.update((url.len() as u64).to_le_bytes());
    h.update(url.as_bytes());
    h.update((ax_tree.len() as u64).to_le_bytes());
    h.update(ax_tree.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    NoKnowledge,
    NoSummarizer,
    /// No knowledge and no summarizer.
    Vanilla,
}

impl AblationMode {
    pub fn uses_knowledge(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::NoSummarizer)
    }

    pub fn uses_summarizer(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::NoKnowledge)
    }

    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::NoKnowledge,
        AblationMode::NoSummarizer,
        AblationMode::Vanilla,
    ];
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Full => "full",
            AblationMode::NoKnowledge => "no_knowledge",
            AblationMode::NoSummarizer => "no_summarizer",
            AblationMode::Vanilla => "vanilla",
        })
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(AblationMode::Full),
            "no_knowledge" => Ok(AblationMode::NoKnowledge),
            "no_summarizer" => Ok(AblationMode::NoSummarizer),
            "vanilla" => Ok(AblationMode::Vanilla),
            other => Err(Error::InvalidInput(format!("unknown mode {other:?}"))),
        }
    }
}

/// Connection settings for an OpenAI-compatible endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            api_key: None,
            model: "gpt-5".into(),
            temperature: 0.0,
            max_tokens: None,
            timeout_secs: 120,
        }
    }
}

impl LlmConfig {
    /// Reads `AGENT_LLM_ENDPOINT`, `AGENT_LLM_API_KEY` and `AGENT_LLM_MODEL`,
    /// keeping defaults for whatever is unset.
    pub fn from_env() -> Self {
        let mut cfg = LlmConfig::default();
        if let Ok(v) = std::env::var("AGENT_LLM_ENDPOINT") {
            cfg.endpoint = v;
        }
        if let Ok(v) = std::env::var("AGENT_LLM_API_KEY") {
            cfg.api_key = Some(v);
        }
        if let Ok(v) = std::env::var("AGENT_LLM_MODEL") {
            cfg.model = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub max_steps: u32,
    pub belief_budget_chars: usize,
    pub akb_path: Option<PathBuf>,
    pub llm: LlmConfig,
    pub ablation_mode: AblationMode,
    /// Observation text cap. Not dictated by anything upstream; 16k chars keeps
    /// prompts well inside common context windows.
    pub ax_tree_max_chars: usize,
    pub retrieval_limit: usize,
    /// Extra model calls allowed after an unparseable response.
    pub parse_retries: u32,
    /// Number of recent steps shown to the policy when the summarizer is ablated.
    pub raw_history_window: usize,
    pub watchdog_retries: u32,
    pub trigger: TriggerConfig,
    /// Directory under which `runs/<run_id>/` is written. `None` keeps runs in memory.
    pub record_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_steps: 30,
            belief_budget_chars: 4096,
            akb_path: None,
            llm: LlmConfig::default(),
            ablation_mode: AblationMode::Full,
            ax_tree_max_chars: 16_000,
            retrieval_limit: 5,
            parse_retries: 2,
            raw_history_window: 3,
            watchdog_retries: 2,
            trigger: TriggerConfig::default(),
            record_dir: None,
        }
    }
}

impl RunConfig {
    pub const MIN_BELIEF_BUDGET: usize = 512;

    pub fn validate(&self) -> Result<(), Error> {
        if self.max_steps < 1 {
            return Err(Error::InvalidInput("max_steps must be at least 1".into()));
        }
        if self.belief_budget_chars < Self::MIN_BELIEF_BUDGET {
            return Err(Error::InvalidInput(format!(
                "belief_budget_chars must be at least {}",
                Self::MIN_BELIEF_BUDGET
            )));
        }
        if self.retrieval_limit < 1 {
            return Err(Error::InvalidInput("retrieval_limit must be at least 1".into()));
        }
        self.trigger.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_is_deterministic() {
        assert_eq!(fingerprint("u", "t"), fingerprint("u", "t"));
    }

    #[test]
    fn fingerprint_separates_inputs() {
        assert_ne!(fingerprint("u", "t"), fingerprint("u", "t2"));
        assert_ne!(fingerprint("ab", "c"), fingerprint("a", "bc"));
    }

    #[test]
    fn fingerprint_of_empty_inputs() {
        let d = fingerprint("", "");
        assert_eq!(d.len(), 64);
    }

    #[test]
    fn duplicate_bids_rejected() {
        let m = |b: &str| Mark { bid: b.into(), role: "button".into(), name: "x".into(), enabled: true };
        assert!(Observation::new(0, "http://h/", "", vec![m("1"), m("1")]).is_err());
        assert!(Observation::new(0, "http://h/", "", vec![m("1"), m("2")]).is_ok());
    }

    #[test]
    fn truncation_keeps_head_and_fingerprint() {
        let mut obs = Observation::new(0, "http://h/", "abcdefghij", vec![]).unwrap();
        let fp = obs.page_fingerprint.clone();
        obs.truncate_ax_tree(4);
        assert!(obs.ax_tree.starts_with("abcd\n"));
        assert_eq!(obs.page_fingerprint, fp);
        let mut short = Observation::new(0, "http://h/", "abc", vec![]).unwrap();
        short.truncate_ax_tree(4);
        assert_eq!(short.ax_tree, "abc");
    }

    #[test]
    fn config_bounds() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.belief_budget_chars = 511;
        assert!(cfg.validate().is_err());
        cfg.belief_budget_chars = 512;
        cfg.max_steps = 0;
        assert!(cfg.validate().is_err());
    }
}
