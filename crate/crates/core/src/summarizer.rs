//! Progressive summarization into a size-bounded belief state.
//!
//! Each step the summary model drafts the three report sections; the
//! summarizer then layers the deterministic parts on top — guard checks
//! against retrieved tips, the note ledger, sub-goal history — and finally
//! squeezes the result into the character budget: oldest history first, then
//! section tails. Notes are never dropped.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::akb::RetrievedKnowledge;
use crate::llm::{ChatMessage, ChatRequest, LlmClient, LlmError};
use crate::model::{Goal, Observation};

pub const SECTION_PROGRESS: &str = "## Current Progress & Knowledge Check";
pub const SECTION_STATE: &str = "## Current State Analysis";
pub const SECTION_GUIDANCE: &str = "## Next-step Guidance";
const META_OPEN: &str = "```belief";
const FENCE: &str = "```";
const TRUNCATED: &str = "…";

#[derive(Debug, Error, PartialEq)]
pub enum SummarizerError {
    #[error("summary model unavailable after {attempts} attempt(s): {reason}")]
    ModelUnavailable { attempts: u32, reason: String },
    #[error("belief budget of {budget} chars cannot hold the required content ({needed} chars)")]
    BudgetImpossible { needed: usize, budget: usize },
    #[error("malformed belief state: {0}")]
    Malformed(String),
}

/// Why the summarizer wants to steer the agent. `tip_id == None` means the
/// agent drifted from the goal rather than against a specific tip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deviation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tip_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub progress_and_knowledge_check: String,
    pub state_analysis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_step_guidance: Option<String>,
    pub active_subgoal: String,
    #[serde(default)]
    pub collapsed_history: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation_flag: Option<Deviation>,
    /// Page the belief was written for; the next action is checked against it.
    #[serde(default)]
    pub page_url: String,
    pub char_len: usize,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\r', "\\r")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Trims a section body and defuses lines that would read as structure.
fn sanitize_body(s: &str) -> String {
    s.trim()
        .lines()
        .map(|l| {
            let t = l.trim_end();
            if t == SECTION_PROGRESS || t == SECTION_STATE || t == SECTION_GUIDANCE || t.starts_with(FENCE) {
                format!(" {t}")
            } else {
                t.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl BeliefState {
    /// The empty state a run starts from.
    pub fn initial() -> Self {
        let mut b = BeliefState::default();
        b.char_len = b.render().chars().count();
        b
    }

    /// The text the operator prompt embeds: three titled sections (the third
    /// only when guidance exists) plus a fenced metadata block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(SECTION_PROGRESS);
        out.push('\n');
        out.push_str(&self.progress_and_knowledge_check);
        out.push_str("\n\n");
        out.push_str(SECTION_STATE);
        out.push('\n');
        out.push_str(&self.state_analysis);
        out.push_str("\n\n");
        if let Some(g) = &self.next_step_guidance {
            out.push_str(SECTION_GUIDANCE);
            out.push('\n');
            out.push_str(g);
            out.push_str("\n\n");
        }
        out.push_str(META_OPEN);
        out.push('\n');
        out.push_str(&format!("subgoal: {}\n", escape(&self.active_subgoal)));
        if !self.page_url.is_empty() {
            out.push_str(&format!("page: {}\n", escape(&self.page_url)));
        }
        if let Some(d) = &self.deviation_flag {
            out.push_str(&format!("deviation: {} | {}\n", d.tip_id.as_deref().unwrap_or("-"), escape(&d.reason)));
        }
        if !self.collapsed_history.is_empty() {
            out.push_str("history:\n");
            for h in &self.collapsed_history {
                out.push_str(&format!("- {}\n", escape(h)));
            }
        }
        if !self.notes.is_empty() {
            out.push_str("notes:\n");
            for n in &self.notes {
                out.push_str(&format!("- {}\n", escape(n)));
            }
        }
        out.push_str(FENCE);
        out
    }

    pub fn refresh_len(&mut self) {
        self.char_len = self.render().chars().count();
    }

    /// Inverse of [`render`](Self::render).
    pub fn parse(text: &str) -> Result<BeliefState, SummarizerError> {
        let bad = |m: &str| SummarizerError::Malformed(m.to_string());
        let lines: Vec<&str> = text.lines().collect();
        let find = |h: &str| lines.iter().position(|l| *l == h);
        let p = find(SECTION_PROGRESS).ok_or_else(|| bad("missing progress section"))?;
        let s = find(SECTION_STATE).ok_or_else(|| bad("missing state section"))?;
        let g = find(SECTION_GUIDANCE);
        let m = find(META_OPEN).ok_or_else(|| bad("missing metadata block"))?;
        let end = lines[m + 1..].iter().position(|l| *l == FENCE).map(|i| m + 1 + i).ok_or_else(|| bad("unterminated metadata block"))?;
        if !(p < s && s < g.unwrap_or(s + 1) && g.unwrap_or(s) < m) {
            return Err(bad("sections out of order"));
        }
        let body = |from: usize, to: usize| lines[from + 1..to].join("\n").trim_end_matches('\n').to_string();
        let mut b = BeliefState {
            progress_and_knowledge_check: body(p, s),
            state_analysis: body(s, g.unwrap_or(m)),
            next_step_guidance: g.map(|g| body(g, m)),
            ..BeliefState::default()
        };
        let mut list: Option<&mut Vec<String>> = None;
        for line in &lines[m + 1..end] {
            if let Some(v) = line.strip_prefix("subgoal: ") {
                b.active_subgoal = unescape(v);
            } else if let Some(v) = line.strip_prefix("page: ") {
                b.page_url = unescape(v);
            } else if let Some(v) = line.strip_prefix("deviation: ") {
                let (id, reason) = v.split_once(" | ").ok_or_else(|| bad("bad deviation line"))?;
                b.deviation_flag = Some(Deviation { tip_id: (id != "-").then(|| id.to_string()), reason: unescape(reason) });
            } else if *line == "history:" {
                list = Some(&mut b.collapsed_history);
            } else if *line == "notes:" {
                list = Some(&mut b.notes);
            } else if let Some(item) = line.strip_prefix("- ") {
                list.as_mut().ok_or_else(|| bad("list item outside a list"))?.push(unescape(item));
            } else if *line == "subgoal:" {
                b.active_subgoal.clear();
            } else {
                return Err(bad(&format!("unexpected metadata line {line:?}")));
            }
        }
        // the rendered bodies blank-line separate sections
        for s in [&mut b.progress_and_knowledge_check, &mut b.state_analysis] {
            *s = s.trim_end().to_string();
        }
        if let Some(g) = &mut b.next_step_guidance {
            *g = g.trim_end().to_string();
        }
        b.char_len = text.chars().count();
        Ok(b)
    }
}

/// First violated guard among the retrieved tips, in retrieval order.
///
/// `url` is the page the action was taken on.
pub fn check_guards(knowledge: &RetrievedKnowledge, planned: &Action, url: &str) -> Option<Deviation> {
    knowledge.tips().find_map(|tip| {
        let guard = tip.guard.as_ref()?;
        guard
            .violation(planned, url)
            .map(|reason| Deviation { tip_id: Some(tip.id.clone()), reason })
    })
}

/// Longest suffix of `lines` whose total length fits `budget` characters.
/// Never reorders; keeps the newest line whenever it fits on its own.
pub fn collapse(lines: &[String], budget: usize) -> Vec<String> {
    let mut total = 0;
    let mut start = lines.len();
    for (i, l) in lines.iter().enumerate().rev() {
        let n = l.chars().count();
        if total + n > budget {
            break;
        }
        total += n;
        start = i;
    }
    lines[start..].to_vec()
}

/// Host plus the first two path segments; the sub-goal boundary heuristic.
pub fn path_prefix(url: &str) -> String {
    match url::Url::parse(url) {
        Ok(u) => {
            let segs: Vec<&str> = u.path_segments().map(|s| s.filter(|x| !x.is_empty()).take(2).collect()).unwrap_or_default();
            format!("{}/{}", u.host_str().unwrap_or(""), segs.join("/"))
        }
        Err(_) => url.to_string(),
    }
}

pub struct SummaryInput<'a> {
    pub prev: &'a BeliefState,
    pub obs: &'a Observation,
    pub knowledge: &'a RetrievedKnowledge,
    pub last_action: Option<&'a Action>,
    pub goal: &'a Goal,
    /// Guard violation already found by the deterministic check.
    pub deviation: Option<&'a Deviation>,
}

/// What a summary model contributes; everything else is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SummaryDraft {
    pub progress: String,
    pub state_analysis: String,
    pub guidance: Option<String>,
    pub active_subgoal: Option<String>,
    pub completed_subgoal: Option<String>,
    /// Set when the model itself judges the agent to have left the goal.
    pub goal_deviation: Option<String>,
}

pub trait SummaryModel: Send + Sync {
    fn draft(&self, input: &SummaryInput<'_>) -> Result<SummaryDraft, SummarizerError>;
}

fn page_title(obs: &Observation) -> &str {
    obs.ax_tree
        .lines()
        .find_map(|l| l.trim().strip_prefix("RootWebArea '").and_then(|r| r.split('\'').next()))
        .unwrap_or("")
}

fn first_sentence(text: &str, max: usize) -> String {
    let s = text.split_terminator(['.', '?', '!', '\n']).next().unwrap_or(text).trim();
    let mut out: String = s.chars().take(max).collect();
    if s.chars().count() > max {
        out.push_str(TRUNCATED);
    }
    out
}

/// Deterministic summary model for tests and offline runs.
pub struct StubSummaryModel;

impl SummaryModel for StubSummaryModel {
    fn draft(&self, input: &SummaryInput<'_>) -> Result<SummaryDraft, SummarizerError> {
        let mut progress = format!("Step {}.", input.obs.step);
        match input.last_action {
            Some(a) => progress.push_str(&format!(" Last action: {a}.")),
            None => progress.push_str(" No action taken yet."),
        }
        if input.knowledge.is_empty() {
            progress.push_str("\nNo expert tips apply here; tracking progress only.");
        } else {
            let ids: Vec<&str> = input.knowledge.tips().map(|t| t.id.as_str()).collect();
            match input.deviation {
                Some(d) => progress.push_str(&format!(
                    "\nKnowledge check: the last action conflicts with tip {}.",
                    d.tip_id.as_deref().unwrap_or("?")
                )),
                None => progress.push_str(&format!("\nKnowledge check: consistent with {}.", ids.join(", "))),
            }
        }
        let mut state = format!("On '{}' ({}).", page_title(input.obs), input.obs.url);
        if !input.obs.marks.is_empty() {
            let shown: Vec<String> = input
                .obs
                .marks
                .iter()
                .take(12)
                .map(|m| format!("[{}] {} '{}'", m.bid, m.role, m.name))
                .collect();
            state.push_str(&format!(" Interactive: {}", shown.join("; ")));
            if input.obs.marks.len() > 12 {
                state.push_str(&format!("; +{} more", input.obs.marks.len() - 12));
            }
        }
        let active_subgoal = input
            .prev
            .active_subgoal
            .is_empty()
            .then(|| format!("Work toward: {}", first_sentence(&input.goal.instruction, 160)));
        Ok(SummaryDraft { progress, state_analysis: state, active_subgoal, ..SummaryDraft::default() })
    }
}

const SUMMARIZER_PROMPT: &str = include_str!("../assets/prompts/summarizer.v1.txt");

/// Summary model backed by a chat model and the summarizer prompt.
pub struct LlmSummaryModel {
    client: Arc<dyn LlmClient>,
    model: String,
    retries: u32,
}

impl LlmSummaryModel {
    pub fn new(client: Arc<dyn LlmClient>, model: impl Into<String>) -> Self {
        LlmSummaryModel { client, model: model.into(), retries: 2 }
    }

    fn user_message(input: &SummaryInput<'_>) -> String {
        let mut knowledge = String::new();
        for t in input.knowledge.tips() {
            knowledge.push_str(&format!("- [{}] {} / {}\n", t.id, t.scope, t.action_guidance));
        }
        if knowledge.is_empty() {
            knowledge.push_str("(none)\n");
        }
        format!(
            "goal:\n{}\n\nrelevant_knowledge:\n{}\nlast_action:\n{}\n\nprevious_summary:\n{}\n\nurl: {}\naxtree_txt:\n{}\n",
            input.goal.instruction,
            knowledge,
            input.last_action.map(|a| a.to_string()).unwrap_or_else(|| "(none)".into()),
            input.prev.render(),
            input.obs.url,
            input.obs.ax_tree
        )
    }
}

fn transient(e: &LlmError) -> bool {
    matches!(e, LlmError::Timeout(_) | LlmError::Unavailable(_) | LlmError::RateLimited { .. })
}

/// Splits a model report into its titled sections and trailing tags.
pub fn parse_draft(text: &str) -> SummaryDraft {
    let mut draft = SummaryDraft::default();
    let mut current: Option<&str> = None;
    let mut progress = Vec::new();
    let mut state = Vec::new();
    let mut guidance: Option<Vec<&str>> = None;
    for line in text.lines() {
        let t = line.trim();
        if t == SECTION_PROGRESS || t == SECTION_STATE || t == SECTION_GUIDANCE {
            current = Some(if t == SECTION_PROGRESS {
                "p"
            } else if t == SECTION_STATE {
                "s"
            } else {
                guidance.get_or_insert_with(Vec::new);
                "g"
            });
            continue;
        }
        if let Some(v) = t.strip_prefix("SUBGOAL:") {
            draft.active_subgoal = Some(v.trim().to_string()).filter(|s| !s.is_empty());
            continue;
        }
        if let Some(v) = t.strip_prefix("COMPLETED:") {
            draft.completed_subgoal = Some(v.trim().to_string()).filter(|s| !s.is_empty());
            continue;
        }
        match current {
            Some("p") => progress.push(line),
            Some("s") => state.push(line),
            Some("g") => guidance.get_or_insert_with(Vec::new).push(line),
            _ => {}
        }
    }
    draft.progress = progress.join("\n").trim().to_string();
    draft.state_analysis = state.join("\n").trim().to_string();
    draft.guidance = guidance.map(|g| g.join("\n").trim().to_string()).filter(|g| !g.is_empty());
    draft
}

impl SummaryModel for LlmSummaryModel {
    fn draft(&self, input: &SummaryInput<'_>) -> Result<SummaryDraft, SummarizerError> {
        let req = ChatRequest::new(
            &self.model,
            vec![ChatMessage::system(SUMMARIZER_PROMPT), ChatMessage::user(Self::user_message(input))],
        );
        let mut attempts = 0;
        let text = loop {
            attempts += 1;
            match self.client.complete(&req) {
                Ok(r) => break r.text,
                Err(e) if transient(&e) && attempts <= self.retries => continue,
                Err(e) => return Err(SummarizerError::ModelUnavailable { attempts, reason: e.to_string() }),
            }
        };
        let mut draft = parse_draft(&text);
        if draft.guidance.is_some() && input.deviation.is_none() {
            draft.goal_deviation = Some("the summary model reports a departure from the goal".into());
        }
        Ok(draft)
    }
}

/// Runs the summary model and enforces the belief invariants.
#[derive(Clone)]
pub struct Summarizer {
    model: Arc<dyn SummaryModel>,
    budget: usize,
}

impl Summarizer {
    pub fn new(model: Arc<dyn SummaryModel>, budget: usize) -> Self {
        Summarizer { model, budget }
    }

    pub fn stub(budget: usize) -> Self {
        Self::new(Arc::new(StubSummaryModel), budget)
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn summarize(
        &self,
        prev: &BeliefState,
        obs: &Observation,
        knowledge: &RetrievedKnowledge,
        last_action: Option<&Action>,
        goal: &Goal,
    ) -> Result<BeliefState, SummarizerError> {
        let acted_on = if prev.page_url.is_empty() { obs.url.as_str() } else { prev.page_url.as_str() };
        let deviation = match last_action {
            Some(a) if !knowledge.is_empty() => check_guards(knowledge, a, acted_on),
            _ => None,
        };
        let draft = self.model.draft(&SummaryInput { prev, obs, knowledge, last_action, goal, deviation: deviation.as_ref() })?;

        let mut notes = prev.notes.clone();
        if let Some(Action::TakeNote(text)) = last_action {
            notes.push(text.clone());
        }

        let mut history = prev.collapsed_history.clone();
        let boundary = !prev.page_url.is_empty() && path_prefix(&prev.page_url) != path_prefix(&obs.url);
        match draft.completed_subgoal {
            Some(done) => history.push(single_line(&done)),
            None if boundary && !prev.active_subgoal.is_empty() => history.push(format!(
                "step {}: {} (left {})",
                obs.step,
                prev.active_subgoal,
                path_prefix(&prev.page_url)
            )),
            None => {}
        }
        let active_subgoal = match draft.active_subgoal {
            Some(s) => single_line(&s),
            None if boundary => format!("Continue on {} toward the goal", path_prefix(&obs.url)),
            None => prev.active_subgoal.clone(),
        };

        let (deviation_flag, guidance) = match (deviation, draft.goal_deviation) {
            (Some(d), _) => {
                let tip = d.tip_id.as_deref().and_then(|id| knowledge.tips().find(|t| t.id == id));
                let text = draft.guidance.clone().unwrap_or_else(|| match tip {
                    Some(t) => format!(
                        "The last action went against tip {}: {}. The tip says: \"{}\"",
                        t.id, d.reason, t.action_guidance
                    ),
                    None => d.reason.clone(),
                });
                (Some(d), Some(text))
            }
            (None, Some(reason)) => {
                let text = draft.guidance.clone().unwrap_or_else(|| reason.clone());
                (Some(Deviation { tip_id: None, reason }), Some(text))
            }
            (None, None) => (None, None),
        };

        let belief = BeliefState {
            progress_and_knowledge_check: sanitize_body(&draft.progress),
            state_analysis: sanitize_body(&draft.state_analysis),
            next_step_guidance: guidance.map(|g| sanitize_body(&g)),
            active_subgoal: single_line(&active_subgoal),
            collapsed_history: history.iter().map(|h| single_line(h)).collect(),
            notes,
            deviation_flag,
            page_url: obs.url.clone(),
            char_len: 0,
        };
        enforce_budget(belief, self.budget)
    }
}

fn truncate_tail(s: &mut String, drop: usize) -> usize {
    let n = s.chars().count();
    if n == 0 || drop == 0 {
        return 0;
    }
    let marker = TRUNCATED.chars().count();
    if drop + marker >= n {
        s.clear();
        return n;
    }
    let keep = n - drop - marker;
    let idx = s.char_indices().nth(keep).map(|(i, _)| i).unwrap_or(s.len());
    s.truncate(idx);
    s.push_str(TRUNCATED);
    drop
}

/// Shrinks `b` until its rendering fits `budget`: oldest history lines go
/// first, then the tails of the analysis, progress, guidance and sub-goal
/// text. Notes, the page URL and the deviation flag are never touched.
pub fn enforce_budget(mut b: BeliefState, budget: usize) -> Result<BeliefState, SummarizerError> {
    b.refresh_len();
    if b.char_len <= budget {
        return Ok(b);
    }
    if !b.collapsed_history.is_empty() {
        let all = std::mem::take(&mut b.collapsed_history);
        b.refresh_len();
        // "history:\n" header plus "- " and "\n" around each line
        let avail = budget.saturating_sub(b.char_len + "history:\n".len());
        let framed: Vec<String> = all.iter().map(|l| format!("- {l}\n")).collect();
        let kept = collapse(&framed, avail);
        b.collapsed_history = all[all.len() - kept.len()..].to_vec();
        b.refresh_len();
    }
    let fields: [fn(&mut BeliefState) -> &mut String; 3] = [
        |b| &mut b.state_analysis,
        |b| &mut b.progress_and_knowledge_check,
        |b| &mut b.active_subgoal,
    ];
    for field in fields {
        if b.char_len <= budget {
            break;
        }
        let excess = b.char_len - budget;
        truncate_tail(field(&mut b), excess);
        b.refresh_len();
    }
    if b.char_len > budget {
        if let Some(g) = b.next_step_guidance.as_mut() {
            truncate_tail(g, b.char_len - budget);
            b.refresh_len();
        }
    }
    if b.char_len > budget {
        return Err(SummarizerError::BudgetImpossible { needed: b.char_len, budget });
    }
    Ok(b)
}
