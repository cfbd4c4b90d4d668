//! Failure detection: deterministic rules plus an optional semantic evaluator.
//!
//! Rules, checked in this order:
//!
//! 1. **loop** — the last `loop_window` steps all took the same action on the
//!    same page (identical `(action, fingerprint)` pairs);
//! 2. **parse** — the last `parse_failure_limit` steps all failed to parse;
//! 3. **error page** — the page text contains a configured error marker;
//! 4. **budget** — the step counter reached `max_steps` without a stop.
//!
//! If no rule fires and a semantic evaluator is attached, it gets the final
//! say. An evaluator outage never fails the run; it is mentioned in the
//! verdict detail instead.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::llm::{ChatMessage, ChatRequest, LlmClient};
use crate::model::{Goal, Observation};
use crate::summarizer::BeliefState;
use crate::trace::{ActFailureKind, ActRecord, Trajectory};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    /// Identical consecutive (action, page) pairs that count as a loop.
    pub loop_window: usize,
    /// Consecutive unparseable model replies that end the run.
    pub parse_failure_limit: usize,
    pub error_markers: Vec<String>,
    /// Consult the semantic evaluator when one is attached.
    pub semantic: bool,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            loop_window: 3,
            parse_failure_limit: 2,
            error_markers: vec![
                "404 Not Found".into(),
                "500 Internal Server Error".into(),
                "502 Bad Gateway".into(),
                "This site can't be reached".into(),
            ],
            semantic: true,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.loop_window < 2 {
            return Err(Error::InvalidInput("trigger.loop_window must be at least 2".into()));
        }
        if self.parse_failure_limit < 1 {
            return Err(Error::InvalidInput("trigger.parse_failure_limit must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerSource {
    RuleLoop,
    RuleBudget,
    RuleParse,
    RuleErrorPage,
    Semantic,
}

impl TriggerSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TriggerSource::RuleLoop => "rule_loop",
            TriggerSource::RuleBudget => "rule_budget",
            TriggerSource::RuleParse => "rule_parse",
            TriggerSource::RuleErrorPage => "rule_error_page",
            TriggerSource::Semantic => "semantic",
        }
    }
}

impl std::fmt::Display for TriggerSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerVerdict {
    pub fired: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<TriggerSource>,
    pub detail: String,
    /// Steps that support the verdict.
    #[serde(default)]
    pub evidence: Vec<u32>,
}

impl TriggerVerdict {
    pub fn quiet(detail: impl Into<String>) -> Self {
        TriggerVerdict { fired: false, source: None, detail: detail.into(), evidence: Vec::new() }
    }

    pub fn fire(source: TriggerSource, detail: impl Into<String>, evidence: Vec<u32>) -> Self {
        TriggerVerdict { fired: true, source: Some(source), detail: detail.into(), evidence }
    }
}

/// The `(step, action, page fingerprint)` triple of every executed action, in order.
pub fn action_pairs(traj: &Trajectory) -> Vec<(u32, Option<(String, String)>)> {
    traj.acts()
        .map(|(step, rec)| {
            let pair = rec.decision().and_then(|d| {
                traj.observation_at(step).map(|o| (d.action.to_string(), o.page_fingerprint.clone()))
            });
            (step, pair)
        })
        .collect()
}

fn loop_rule(traj: &Trajectory, k: usize) -> Option<TriggerVerdict> {
    let pairs = action_pairs(traj);
    if pairs.len() < k {
        return None;
    }
    let window = &pairs[pairs.len() - k..];
    let first = window[0].1.as_ref()?;
    if window.iter().all(|(_, p)| p.as_ref() == Some(first)) {
        return Some(TriggerVerdict::fire(
            TriggerSource::RuleLoop,
            format!("`{}` repeated {k} times on an unchanged page", first.0),
            window.iter().map(|(s, _)| *s).collect(),
        ));
    }
    None
}

fn parse_rule(traj: &Trajectory, m: usize) -> Option<TriggerVerdict> {
    let acts: Vec<(u32, &ActRecord)> = traj.acts().collect();
    if acts.len() < m {
        return None;
    }
    let window = &acts[acts.len() - m..];
    let all_failed = window
        .iter()
        .all(|(_, r)| matches!(r, ActRecord::Failed { failure: ActFailureKind::Parse, .. }));
    all_failed.then(|| {
        TriggerVerdict::fire(
            TriggerSource::RuleParse,
            format!("{m} consecutive unparseable model replies"),
            window.iter().map(|(s, _)| *s).collect(),
        )
    })
}

/// Evaluates the deterministic rules only. Pure.
pub fn evaluate_rules(obs: &Observation, traj: &Trajectory, cfg: &TriggerConfig, max_steps: u32) -> TriggerVerdict {
    if let Some(v) = loop_rule(traj, cfg.loop_window) {
        return v;
    }
    if let Some(v) = parse_rule(traj, cfg.parse_failure_limit) {
        return v;
    }
    if let Some(marker) = cfg.error_markers.iter().find(|m| !m.is_empty() && obs.ax_tree.contains(m.as_str())) {
        return TriggerVerdict::fire(
            TriggerSource::RuleErrorPage,
            format!("page {} shows error marker {marker:?}", obs.url),
            vec![obs.step],
        );
    }
    if obs.step >= max_steps && !traj.stopped() {
        return TriggerVerdict::fire(
            TriggerSource::RuleBudget,
            format!("step budget of {max_steps} exhausted without a stop"),
            vec![obs.step],
        );
    }
    TriggerVerdict::quiet("no rule fired")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticAssessment {
    pub consistent: bool,
    pub rationale: String,
}

/// Judges whether the agent's situation is still consistent with the goal.
pub trait SemanticEvaluator: Send + Sync {
    fn assess(&self, goal: &Goal, obs: &Observation, belief: Option<&BeliefState>) -> Result<SemanticAssessment, String>;
}

/// Never objects. Used when no evaluator model is available.
pub struct AlwaysConsistent;

impl SemanticEvaluator for AlwaysConsistent {
    fn assess(&self, _: &Goal, _: &Observation, _: Option<&BeliefState>) -> Result<SemanticAssessment, String> {
        Ok(SemanticAssessment { consistent: true, rationale: "stub evaluator".into() })
    }
}

const SEMANTIC_PROMPT: &str = include_str!("../assets/prompts/semantic_check.v1.txt");

/// Asks a chat model for a CONSISTENT / INCONSISTENT judgement.
pub struct LlmSemanticEvaluator {
    client: Arc<dyn LlmClient>,
    model: String,
}

impl LlmSemanticEvaluator {
    pub fn new(client: Arc<dyn LlmClient>, model: impl Into<String>) -> Self {
        LlmSemanticEvaluator { client, model: model.into() }
    }
}

impl SemanticEvaluator for LlmSemanticEvaluator {
    fn assess(&self, goal: &Goal, obs: &Observation, belief: Option<&BeliefState>) -> Result<SemanticAssessment, String> {
        let mut user = format!("Task: {}\n\nURL: {}\n\nPage:\n{}\n", goal.instruction, obs.url, obs.ax_tree);
        if let Some(b) = belief {
            user.push_str(&format!("\nAgent summary:\n{}\n", b.render()));
        }
        let req = ChatRequest::new(
            &self.model,
            vec![ChatMessage::system(SEMANTIC_PROMPT), ChatMessage::user(user)],
        );
        let text = self.client.complete(&req).map_err(|e| e.to_string())?.text;
        let verdict = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("").to_ascii_uppercase();
        let rationale = text.lines().skip(1).collect::<Vec<_>>().join("\n").trim().to_string();
        if verdict.starts_with("INCONSISTENT") {
            Ok(SemanticAssessment { consistent: false, rationale })
        } else if verdict.starts_with("CONSISTENT") {
            Ok(SemanticAssessment { consistent: true, rationale })
        } else {
            Err(format!("unrecognised evaluator reply {verdict:?}"))
        }
    }
}

/// Rules plus the optional semantic evaluator.
#[derive(Clone)]
pub struct Trigger {
    cfg: TriggerConfig,
    max_steps: u32,
    semantic: Option<Arc<dyn SemanticEvaluator>>,
}

impl Trigger {
    pub fn new(cfg: TriggerConfig, max_steps: u32) -> Self {
        Trigger { cfg, max_steps, semantic: None }
    }

    pub fn with_semantic(mut self, evaluator: Arc<dyn SemanticEvaluator>) -> Self {
        self.semantic = Some(evaluator);
        self
    }

    pub fn evaluate(&self, obs: &Observation, traj: &Trajectory, goal: &Goal, belief: Option<&BeliefState>) -> TriggerVerdict {
        let verdict = evaluate_rules(obs, traj, &self.cfg, self.max_steps);
        if verdict.fired || !self.cfg.semantic {
            return verdict;
        }
        let Some(sem) = &self.semantic else { return verdict };
        match sem.assess(goal, obs, belief) {
            Ok(a) if !a.consistent => TriggerVerdict::fire(TriggerSource::Semantic, a.rationale, vec![obs.step]),
            Ok(_) => verdict,
            Err(e) => TriggerVerdict::quiet(format!("no rule fired; semantic evaluator unavailable: {e}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{Action, ActionDecision};
    use crate::model::Mark;
    use crate::trace::{Payload, TraceEvent};
    use crate::akb::RetrievedKnowledge;

    fn obs(step: u32, ax: &str) -> Observation {
        Observation::new(step, "http://shop.test/admin/catalog/product/", ax, vec![Mark {
            bid: "1773".into(),
            role: "gridcell".into(),
            name: "Phoebe Zipper Sweatshirt".into(),
            enabled: true,
        }])
        .unwrap()
    }

    fn push_step(traj: &mut Trajectory, step: u32, ax: &str, act: ActRecord) {
        traj.append_event(TraceEvent::new(step, 0, Payload::Observation(obs(step, ax)))).unwrap();
        traj.append_event(TraceEvent::new(step, 0, Payload::Retrieved(RetrievedKnowledge::empty("u")))).unwrap();
        traj.append_event(TraceEvent::new(step, 0, Payload::Act(act))).unwrap();
    }

    fn click(bid: &str) -> ActRecord {
        let action = Action::Click(bid.into());
        ActRecord::Decided { decision: ActionDecision { think: String::new(), raw: action.to_string(), action }, retry_count: 0 }
    }

    fn parse_fail() -> ActRecord {
        ActRecord::Failed { failure: ActFailureKind::Parse, detail: "x".into(), raw: None, retry_count: 2 }
    }

    #[test]
    fn fresh_trajectory_is_quiet() {
        let traj = Trajectory::new("g");
        assert!(!evaluate_rules(&obs(0, "grid"), &traj, &TriggerConfig::default(), 30).fired);
    }

    #[test]
    fn third_identical_click_fires_loop() {
        let cfg = TriggerConfig::default();
        let mut traj = Trajectory::new("g");
        for step in 0..3 {
            push_step(&mut traj, step, "grid", click("1773"));
            let v = evaluate_rules(&obs(step, "grid"), &traj, &cfg, 30);
            assert_eq!(v.fired, step == 2, "step {step}");
            if v.fired {
                assert_eq!(v.source, Some(TriggerSource::RuleLoop));
                assert_eq!(v.evidence, vec![0, 1, 2]);
            }
        }
    }

    #[test]
    fn changing_page_breaks_the_loop() {
        let cfg = TriggerConfig::default();
        let mut traj = Trajectory::new("g");
        push_step(&mut traj, 0, "a", click("1773"));
        push_step(&mut traj, 1, "b", click("1773"));
        push_step(&mut traj, 2, "a", click("1773"));
        assert!(!evaluate_rules(&obs(2, "a"), &traj, &cfg, 30).fired);
    }

    #[test]
    fn parse_failures_fire() {
        let cfg = TriggerConfig::default();
        let mut traj = Trajectory::new("g");
        push_step(&mut traj, 0, "a", parse_fail());
        assert!(!evaluate_rules(&obs(0, "a"), &traj, &cfg, 30).fired);
        push_step(&mut traj, 1, "a", parse_fail());
        assert_eq!(evaluate_rules(&obs(1, "a"), &traj, &cfg, 30).source, Some(TriggerSource::RuleParse));
    }

    #[test]
    fn budget_and_error_page() {
        let cfg = TriggerConfig::default();
        let traj = Trajectory::new("g");
        assert_eq!(evaluate_rules(&obs(30, "a"), &traj, &cfg, 30).source, Some(TriggerSource::RuleBudget));
        assert!(!evaluate_rules(&obs(29, "a"), &traj, &cfg, 30).fired);
        let v = evaluate_rules(&obs(3, "RootWebArea '404 Not Found'"), &traj, &cfg, 30);
        assert_eq!(v.source, Some(TriggerSource::RuleErrorPage));
    }

    struct Broken;
    impl SemanticEvaluator for Broken {
        fn assess(&self, _: &Goal, _: &Observation, _: Option<&BeliefState>) -> Result<SemanticAssessment, String> {
            Err("offline".into())
        }
    }

    struct Objects;
    impl SemanticEvaluator for Objects {
        fn assess(&self, _: &Goal, _: &Observation, _: Option<&BeliefState>) -> Result<SemanticAssessment, String> {
            Ok(SemanticAssessment { consistent: false, rationale: "wrong product".into() })
        }
    }

    #[test]
    fn semantic_outage_degrades_to_rules() {
        let goal = Goal::new("g", "x");
        let traj = Trajectory::new("g");
        let t = Trigger::new(TriggerConfig::default(), 30).with_semantic(Arc::new(Broken));
        let v = t.evaluate(&obs(0, "a"), &traj, &goal, None);
        assert!(!v.fired);
        assert!(v.detail.contains("unavailable"));
        let t = Trigger::new(TriggerConfig::default(), 30).with_semantic(Arc::new(Objects));
        assert_eq!(t.evaluate(&obs(0, "a"), &traj, &goal, None).source, Some(TriggerSource::Semantic));
        let t = Trigger::new(TriggerConfig::default(), 30).with_semantic(Arc::new(AlwaysConsistent));
        assert!(!t.evaluate(&obs(0, "a"), &traj, &goal, None).fired);
    }
}
