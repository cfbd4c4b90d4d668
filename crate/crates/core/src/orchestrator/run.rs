use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::akb::{KnowledgeBase, RetrievedKnowledge};
use crate::env::{evaluate_success, EnvError, EnvResult, Environment, EvalMode, EvalOutcome, FinalState, Watchdog};
use crate::llm::{ChatParams, LlmClient, OpenAiClient};
use crate::model::{AblationMode, Goal, RunConfig};
use crate::operator::{Memory, Operator, OperatorError};
use crate::summarizer::{BeliefState, LlmSummaryModel, StubSummaryModel, SummaryModel, Summarizer};
use crate::trace::{
    ActFailureKind, ActRecord, Clock, Payload, RunMeta, RunStatus, SystemClock, TraceEvent, Trajectory, TrajectoryWriter,
    TRACE_VERSION,
};
use crate::trigger::{LlmSemanticEvaluator, SemanticEvaluator, Trigger, TriggerVerdict};
use crate::Result;

/// The model-facing collaborators of a run.
#[derive(Clone)]
pub struct RunDeps {
    pub llm: Arc<dyn LlmClient>,
    pub summary_model: Arc<dyn SummaryModel>,
    pub semantic: Option<Arc<dyn SemanticEvaluator>>,
    pub clock: Arc<dyn Clock>,
    /// Fixed run id; generated when `None`.
    pub run_id: Option<String>,
}

impl RunDeps {
    /// Scripted or replayed operator with the deterministic summary model and
    /// no semantic evaluator.
    pub fn offline(llm: Arc<dyn LlmClient>) -> Self {
        RunDeps {
            llm,
            summary_model: Arc::new(StubSummaryModel),
            semantic: None,
            clock: Arc::new(SystemClock),
            run_id: None,
        }
    }

    /// Every collaborator backed by the same chat model.
    pub fn with_model(llm: Arc<dyn LlmClient>, model: &str) -> Self {
        RunDeps {
            summary_model: Arc::new(LlmSummaryModel::new(llm.clone(), model)),
            semantic: Some(Arc::new(LlmSemanticEvaluator::new(llm.clone(), model))),
            llm,
            clock: Arc::new(SystemClock),
            run_id: None,
        }
    }

    /// Connects to the endpoint configured in `cfg.llm`.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let client: Arc<dyn LlmClient> = Arc::new(OpenAiClient::new(&cfg.llm)?);
        Ok(Self::with_model(client, &cfg.llm.model))
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_run_id(mut self, id: impl Into<String>) -> Self {
        self.run_id = Some(id.into());
        self
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub trajectory: Trajectory,
    pub eval: EvalOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    /// The verdict that ended the run, if a trigger fired.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<TriggerVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub final_state: FinalState,
    /// Where the trajectory was persisted, when recording.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_dir: Option<PathBuf>,
}

impl RunOutcome {
    pub fn status(&self) -> RunStatus {
        self.trajectory.status()
    }

    pub fn steps(&self) -> usize {
        self.trajectory.act_count()
    }

    /// Mean rendered belief size over the run, when the summarizer was on.
    pub fn mean_belief_chars(&self) -> Option<f64> {
        let sizes: Vec<usize> = self.trajectory.beliefs().map(|b| b.char_len).collect();
        (!sizes.is_empty()).then(|| sizes.iter().sum::<usize>() as f64 / sizes.len() as f64)
    }
}

pub fn new_run_id(goal_id: &str) -> String {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let slug: String = goal_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{stamp}-{slug}-{}", &uuid::Uuid::new_v4().simple().to_string()[..8])
}

/// Appends to the in-memory trajectory and, when recording, to disk.
struct Recorder<'a> {
    traj: Trajectory,
    writer: Option<TrajectoryWriter>,
    clock: &'a dyn Clock,
}

impl Recorder<'_> {
    fn push(&mut self, step: u32, payload: Payload) -> Result<()> {
        let ev = TraceEvent::new(step, self.clock.now_ms(), payload);
        if let Some(w) = &mut self.writer {
            w.write(&ev)?;
        }
        self.traj.append_event(ev)?;
        Ok(())
    }
}

fn history_line(step: u32, url: &str, act: &ActRecord, result: Option<&EnvResult>) -> String {
    let what = match act {
        ActRecord::Decided { decision, .. } => decision.action.to_string(),
        ActRecord::Failed { failure: ActFailureKind::Parse, .. } => "(reply could not be parsed)".into(),
        ActRecord::Failed { failure: ActFailureKind::Grounding, detail, .. } => format!("(rejected: {detail})"),
    };
    let outcome = match result {
        Some(r) if r.error.is_some() => format!(" -> error: {}", r.error.as_deref().unwrap_or_default()),
        Some(r) => match (&r.note, r.value) {
            (_, Some(v)) => format!(" -> {v}"),
            (Some(n), None) => format!(" -> {n}"),
            (None, None) => String::new(),
        },
        None => String::new(),
    };
    format!("step {step} at {url}: {what}{outcome}")
}

fn eval_mode(goal: &Goal) -> EvalMode {
    if goal.reference_answer.is_some() || goal.validators.is_empty() {
        EvalMode::AnswerBased
    } else {
        EvalMode::Programmatic
    }
}

/// One online episode.
///
/// Each step runs observe → retrieve → summarize → act → env step, then the
/// trigger check. The episode ends on a stop action, a fired trigger, the
/// step cap, or a component error; component errors end it as `aborted`
/// rather than surfacing as `Err`. Only failing to write the trajectory is an
/// error.
pub fn run_task(
    goal: &Goal,
    env: &mut dyn Environment,
    kb: &KnowledgeBase,
    cfg: &RunConfig,
    deps: &RunDeps,
) -> Result<RunOutcome> {
    cfg.validate()?;
    goal.validate()?;
    let mode = cfg.ablation_mode;
    let run_id = deps.run_id.clone().unwrap_or_else(|| new_run_id(&goal.id));
    let writer = match &cfg.record_dir {
        Some(dir) => Some(TrajectoryWriter::create(dir.join("runs").join(&run_id))?),
        None => None,
    };
    let record_dir = writer.as_ref().map(|w| w.dir().to_path_buf());
    let mut rec = Recorder { traj: Trajectory::new(&goal.id), writer, clock: deps.clock.as_ref() };

    let params = ChatParams { temperature: cfg.llm.temperature, max_tokens: cfg.llm.max_tokens };
    let operator = Operator::new(deps.llm.clone(), &cfg.llm.model, params, cfg.parse_retries);
    let summarizer = Summarizer::new(deps.summary_model.clone(), cfg.belief_budget_chars);
    let mut trigger = Trigger::new(cfg.trigger.clone(), cfg.max_steps);
    if let Some(s) = &deps.semantic {
        trigger = trigger.with_semantic(s.clone());
    }

    let mut env = Watchdog::new(env, cfg.watchdog_retries);
    let url_templates = env.url_templates();
    let mut belief = BeliefState::initial();
    let mut history: Vec<String> = Vec::new();
    let mut last_action: Option<Action> = None;
    let mut answer: Option<String> = None;
    let mut stopped = false;
    let mut verdict: Option<TriggerVerdict> = None;
    let mut abort_reason: Option<String> = None;

    for t in 0..=cfg.max_steps {
        env.set_step(t);
        let mut obs = match env.observe() {
            Ok(o) => o,
            Err(e) => {
                abort_reason = Some(format!("observe failed at step {t}: {e}"));
                break;
            }
        };
        obs.step = t;
        obs.truncate_ax_tree(cfg.ax_tree_max_chars);
        if let Some(w) = &rec.writer {
            if let Some(png) = env.screenshot() {
                obs.screenshot_ref = Some(w.screenshots().put(&png)?);
            }
        }
        rec.push(t, Payload::Observation(obs.clone()))?;

        let belief_ref = mode.uses_summarizer().then_some(&belief);
        if t == cfg.max_steps {
            let v = trigger.evaluate(&obs, &rec.traj, goal, belief_ref);
            rec.push(t, Payload::Trigger(v.clone()))?;
            verdict = Some(v);
            break;
        }

        let knowledge = if mode.uses_knowledge() {
            kb.retrieve(&obs, goal, cfg.retrieval_limit)
        } else {
            RetrievedKnowledge::empty(&obs.url)
        };
        rec.push(t, Payload::Retrieved(knowledge.clone()))?;

        let digest;
        let memory = if mode.uses_summarizer() {
            match summarizer.summarize(&belief, &obs, &knowledge, last_action.as_ref(), goal) {
                Ok(b) => belief = b,
                Err(e) => {
                    abort_reason = Some(format!("summarizer failed at step {t}: {e}"));
                    break;
                }
            }
            rec.push(t, Payload::Belief(belief.clone()))?;
            Memory::Belief(&belief)
        } else {
            let from = history.len().saturating_sub(cfg.raw_history_window);
            digest = history[from..].join("\n");
            rec.push(t, Payload::HistoryDigest { text: digest.clone() })?;
            Memory::History(&digest)
        };

        let act = match operator.decide(&obs, memory, &knowledge, goal, &url_templates) {
            Ok((decision, retry_count)) => ActRecord::Decided { decision, retry_count },
            Err(OperatorError::ModelUnavailable(e)) => {
                abort_reason = Some(format!("model unavailable at step {t}: {e}"));
                break;
            }
            Err(e @ OperatorError::ParseFailure { .. }) => {
                let retry_count = e.retry_count();
                let OperatorError::ParseFailure { error, raw, .. } = e else { unreachable!() };
                ActRecord::Failed { failure: ActFailureKind::Parse, detail: error.to_string(), raw: Some(raw), retry_count }
            }
            Err(OperatorError::GroundingFailure { bid, raw, retry_count }) => ActRecord::Failed {
                failure: ActFailureKind::Grounding,
                detail: format!("element [{bid}] is not on the page"),
                raw: Some(raw),
                retry_count,
            },
        };
        rec.push(t, Payload::Act(act.clone()))?;

        last_action = act.decision().map(|d| d.action.clone());
        let mut result = None;
        if let Some(action) = &last_action {
            let r = match env.step(action) {
                Ok(r) => r,
                Err(EnvError::NavigationError(m)) | Err(EnvError::InvalidBid(m)) => {
                    EnvResult { error: Some(m), ..EnvResult::neutral(&obs.url, None) }
                }
                Err(e) => {
                    abort_reason = Some(format!("environment failed at step {t}: {e}"));
                    break;
                }
            };
            rec.push(t, Payload::EnvResult(r.clone()))?;
            result = Some(r);
            if let Action::Stop(a) = action {
                answer = a.clone();
                stopped = true;
                break;
            }
        }
        history.push(history_line(t, &obs.url, &act, result.as_ref()));

        let v = trigger.evaluate(&obs, &rec.traj, goal, mode.uses_summarizer().then_some(&belief));
        if v.fired {
            rec.push(t, Payload::Trigger(v.clone()))?;
            verdict = Some(v);
            break;
        }
    }

    let final_state = env.final_state();
    let eval = if let Some(reason) = &abort_reason {
        EvalOutcome { success: false, mode: eval_mode(goal), detail: format!("aborted: {reason}") }
    } else if stopped {
        evaluate_success(goal, answer.as_deref(), &final_state).unwrap_or_else(|e| EvalOutcome {
            success: false,
            mode: eval_mode(goal),
            detail: e.to_string(),
        })
    } else {
        let why = verdict.as_ref().map(|v| format!("{}: {}", v.source.map(|s| s.as_str()).unwrap_or("trigger"), v.detail));
        EvalOutcome {
            success: false,
            mode: eval_mode(goal),
            detail: format!("ended without stop ({})", why.unwrap_or_else(|| "no verdict".into())),
        }
    };
    let status = if abort_reason.is_some() {
        RunStatus::Aborted
    } else if eval.success {
        RunStatus::Success
    } else {
        RunStatus::Failure
    };
    if let Some(reason) = &abort_reason {
        log::warn!("run {run_id} aborted: {reason}");
    }
    rec.traj.finish(status);

    let outcome = RunOutcome {
        run_id,
        trajectory: rec.traj,
        eval,
        answer,
        verdict,
        abort_reason,
        final_state,
        record_dir,
    };
    if let Some(w) = &rec.writer {
        w.write_meta(&RunMeta {
            v: TRACE_VERSION,
            run_id: outcome.run_id.clone(),
            goal: goal.clone(),
            site_id: env.site_id().to_string(),
            mode,
            status,
            success: Some(outcome.eval.success),
            steps: outcome.steps(),
            answer: outcome.answer.clone(),
        })?;
    }
    Ok(outcome)
}

/// `run_task` with `mode` substituted into `cfg`.
pub fn run_task_in_mode(
    goal: &Goal,
    env: &mut dyn Environment,
    kb: &KnowledgeBase,
    cfg: &RunConfig,
    mode: AblationMode,
    deps: &RunDeps,
) -> Result<RunOutcome> {
    let cfg = RunConfig { ablation_mode: mode, ..cfg.clone() };
    run_task(goal, env, kb, &cfg, deps)
}
