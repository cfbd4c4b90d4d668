//! The policy step: render the prompt, query the model, parse and ground.
//!
//! A reply that does not parse, or that names an element missing from the
//! page, earns a repair nudge: the model sees its own reply, the error (with
//! the offending span quoted) and the formatting rules again. After
//! `parse_retries` nudges the step is given up as a failure.

use std::sync::Arc;

use thiserror::Error;

use crate::action::{parse_envelope, ActionDecision, ActionName, ActionParseError};
use crate::akb::RetrievedKnowledge;
use crate::llm::{ChatMessage, ChatParams, ChatRequest, LlmClient, LlmError};
use crate::model::{Goal, Observation};
use crate::summarizer::BeliefState;

const OPERATOR_TEMPLATE: &str = include_str!("../assets/prompts/operator.v1.txt");
pub const FORMATTING_RULES: &str = include_str!("../assets/prompts/formatting_rules.v1.txt");

/// Shown in place of tips when retrieval is off or came back empty.
pub const NO_KNOWLEDGE_MARKER: &str = "(no expert tips available for this page)";

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("model reply unparseable after {attempts} attempt(s): {error}")]
    ParseFailure { error: ActionParseError, raw: String, attempts: u32 },
    #[error("action targets element [{bid}] which is not on the page")]
    GroundingFailure { bid: String, raw: String, retry_count: u32 },
    #[error(transparent)]
    ModelUnavailable(#[from] LlmError),
}

impl OperatorError {
    /// Nudges spent before giving up.
    pub fn retry_count(&self) -> u32 {
        match self {
            OperatorError::ParseFailure { attempts, .. } => attempts.saturating_sub(1),
            OperatorError::GroundingFailure { retry_count, .. } => *retry_count,
            OperatorError::ModelUnavailable(_) => 0,
        }
    }
}

/// What the operator remembers about earlier steps.
#[derive(Debug, Clone, Copy)]
pub enum Memory<'a> {
    Belief(&'a BeliefState),
    /// Raw recent history, used when the summarizer is switched off.
    History(&'a str),
}

/// The system prompt: role, instructions, action space and output format.
pub fn system_prompt() -> String {
    let space: Vec<String> = ActionName::ALL.iter().map(|n| format!("- {}", n.signature())).collect();
    OPERATOR_TEMPLATE
        .replace("{action_space}", &space.join("\n"))
        .replace("{formatting_rules}", FORMATTING_RULES.trim_end())
}

/// Renders the retrieved tips, four fields each, in retrieval order.
pub fn render_knowledge(knowledge: &RetrievedKnowledge) -> String {
    if knowledge.is_empty() {
        return NO_KNOWLEDGE_MARKER.to_string();
    }
    let mut out = String::new();
    for (i, t) in knowledge.tips().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("[{}] Scope: {}\n", t.id, t.scope));
        out.push_str(&format!("    Action: {}\n", t.action_guidance));
        if !t.constraint.is_empty() {
            out.push_str(&format!("    Constraint: {}\n", t.constraint));
        }
        if !t.goal_alignment.is_empty() {
            out.push_str(&format!("    Goal Alignment: {}\n", t.goal_alignment));
        }
    }
    out.trim_end().to_string()
}

/// The user turn: task, shortcuts, tips, memory and the current page.
pub fn user_prompt(obs: &Observation, memory: Memory<'_>, knowledge: &RetrievedKnowledge, goal: &Goal, url_templates: &[String]) -> String {
    let mut out = format!("# Task\n{}\n\n", goal.instruction.trim());
    if !url_templates.is_empty() {
        out.push_str("# URL Shortcuts\nThese addresses can be opened directly with goto after filling in the braces:\n");
        for t in url_templates {
            out.push_str(&format!("- {t}\n"));
        }
        out.push('\n');
    }
    out.push_str("# Expert Tips\n");
    out.push_str(&render_knowledge(knowledge));
    out.push_str("\n\n");
    match memory {
        Memory::Belief(b) => {
            out.push_str("# Progress Summary\n");
            out.push_str(&b.render());
        }
        Memory::History(h) => {
            out.push_str("# Recent Steps\n");
            out.push_str(if h.trim().is_empty() { "(none yet)" } else { h.trim_end() });
        }
    }
    out.push_str(&format!("\n\n# Current Page\nURL: {}\n{}\n", obs.url, obs.ax_tree));
    out
}

fn repair_message(raw: &str, problem: &str, span: Option<&std::ops::Range<usize>>) -> String {
    let mut msg = format!("Your reply could not be executed: {problem}.");
    if let Some(span) = span {
        let excerpt = raw.get(span.clone()).unwrap_or("").trim();
        if !excerpt.is_empty() {
            let excerpt: String = excerpt.chars().take(200).collect();
            msg.push_str(&format!("\nThe problem is here: {excerpt}"));
        }
    }
    msg.push_str("\nReply again with exactly one command, following these rules:\n");
    msg.push_str(FORMATTING_RULES.trim_end());
    msg
}

pub struct Operator {
    client: Arc<dyn LlmClient>,
    model: String,
    params: ChatParams,
    parse_retries: u32,
}

impl Operator {
    pub fn new(client: Arc<dyn LlmClient>, model: impl Into<String>, params: ChatParams, parse_retries: u32) -> Self {
        Operator { client, model: model.into(), params, parse_retries }
    }

    pub fn build_request(
        &self,
        obs: &Observation,
        memory: Memory<'_>,
        knowledge: &RetrievedKnowledge,
        goal: &Goal,
        url_templates: &[String],
    ) -> ChatRequest {
        ChatRequest::new(
            &self.model,
            vec![ChatMessage::system(system_prompt()), ChatMessage::user(user_prompt(obs, memory, knowledge, goal, url_templates))],
        )
        .with_params(self.params.clone())
    }

    /// One decision with at most `1 + parse_retries` model calls. Returns the
    /// decision and the number of nudges it took.
    pub fn decide(
        &self,
        obs: &Observation,
        memory: Memory<'_>,
        knowledge: &RetrievedKnowledge,
        goal: &Goal,
        url_templates: &[String],
    ) -> Result<(ActionDecision, u32), OperatorError> {
        let mut req = self.build_request(obs, memory, knowledge, goal, url_templates);
        let mut retries = 0;
        loop {
            let raw = self.client.complete(&req)?.text;
            let problem = match parse_envelope(&raw) {
                Ok(decision) => match decision.action.bid() {
                    Some(bid) if !obs.has_bid(bid) => {
                        if retries >= self.parse_retries {
                            return Err(OperatorError::GroundingFailure { bid: bid.to_string(), raw, retry_count: retries });
                        }
                        repair_message(&raw, &format!("element [{bid}] does not exist on the current page"), None)
                    }
                    _ => return Ok((decision, retries)),
                },
                Err(error) => {
                    if retries >= self.parse_retries {
                        return Err(OperatorError::ParseFailure { error, raw, attempts: retries + 1 });
                    }
                    repair_message(&raw, &error.to_string(), Some(error.span()))
                }
            };
            log::debug!("operator nudge {}: {problem}", retries + 1);
            req.messages.push(ChatMessage::assistant(raw));
            req.messages.push(ChatMessage::user(problem));
            retries += 1;
        }
    }
}
