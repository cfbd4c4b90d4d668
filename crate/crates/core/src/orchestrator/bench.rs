use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::run::{run_task, RunDeps, RunOutcome};
use super::suite::{Suite, SuiteTask};
use crate::akb::{AkbStore, KnowledgeBase};
use crate::llm::{LlmClient, ScriptedStub, StubScript};
use crate::model::{AblationMode, RunConfig};
use crate::trace::{RunStatus, TickClock};
use crate::trigger::TriggerSource;
use crate::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

/// Where model replies come from during a bench or adaptation run.
#[derive(Clone)]
pub enum Backend {
    /// A fresh [`ScriptedStub`] per run, with the deterministic summary model.
    Scripted(Arc<StubScript>),
    /// Any client (live endpoint, cassette, ...). With `model_summarizer` the
    /// summary model and semantic evaluator also go through the client.
    Client { client: Arc<dyn LlmClient>, model_summarizer: bool },
}

impl Backend {
    /// The suite's own stub script.
    pub fn scripted_for(suite: &Suite) -> Result<Self> {
        suite
            .stub
            .clone()
            .map(Backend::Scripted)
            .ok_or_else(|| Error::InvalidInput(format!("suite {:?} ships no stub script", suite.name)))
    }

    pub fn deps(&self, cfg: &RunConfig) -> RunDeps {
        match self {
            Backend::Scripted(script) => {
                RunDeps::offline(Arc::new(ScriptedStub::new((**script).clone()))).with_clock(Arc::new(TickClock::default()))
            }
            Backend::Client { client, model_summarizer: false } => RunDeps::offline(client.clone()),
            Backend::Client { client, model_summarizer: true } => RunDeps::with_model(client.clone(), &cfg.llm.model),
        }
    }
}

#[derive(Clone)]
pub struct BenchConfig {
    pub run: RunConfig,
    /// Evaluation protocol: the knowledge base must be frozen and tasks run
    /// strictly one after another.
    pub protocol: bool,
    /// Run tasks concurrently. Refused under the protocol.
    pub parallel: bool,
    pub backend: Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub domain: String,
    pub status: RunStatus,
    pub success: bool,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_belief_chars: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<TriggerSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub detail: String,
}

impl TaskResult {
    pub fn from_outcome(task: &SuiteTask, out: &RunOutcome) -> Self {
        TaskResult {
            task_id: task.id.clone(),
            domain: task.domain.clone(),
            status: out.status(),
            success: out.eval.success,
            steps: out.steps(),
            mean_belief_chars: out.mean_belief_chars(),
            trigger: out.verdict.as_ref().and_then(|v| v.source),
            answer: out.answer.clone(),
            detail: out.eval.detail.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub tasks: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
}

impl Stats {
    fn of<'a>(results: impl IntoIterator<Item = &'a TaskResult>) -> Self {
        let (mut tasks, mut successes, mut steps) = (0usize, 0usize, 0usize);
        for r in results {
            tasks += 1;
            successes += r.success as usize;
            steps += r.steps;
        }
        let ratio = |n: usize| if tasks == 0 { 0.0 } else { n as f64 / tasks as f64 };
        Stats { tasks, successes, success_rate: ratio(successes), mean_steps: ratio(steps) }
    }
}

/// Machine-readable bench result; [`Report::render_text`] gives the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub v: u32,
    pub suite: String,
    pub mode: AblationMode,
    pub protocol: bool,
    pub overall: Stats,
    pub per_domain: BTreeMap<String, Stats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_belief_chars: Option<f64>,
    pub tasks: Vec<TaskResult>,
}

impl Report {
    pub fn new(suite: &str, mode: AblationMode, protocol: bool, tasks: Vec<TaskResult>) -> Self {
        let mut domains: BTreeMap<String, Vec<&TaskResult>> = BTreeMap::new();
        for t in &tasks {
            domains.entry(t.domain.clone()).or_default().push(t);
        }
        let per_domain = domains.into_iter().map(|(d, rs)| (d, Stats::of(rs))).collect();
        let beliefs: Vec<f64> = tasks.iter().filter_map(|t| t.mean_belief_chars).collect();
        let mean_belief_chars = (!beliefs.is_empty()).then(|| beliefs.iter().sum::<f64>() / beliefs.len() as f64);
        Report {
            v: REPORT_VERSION,
            suite: suite.to_string(),
            mode,
            protocol,
            overall: Stats::of(&tasks),
            per_domain,
            mean_belief_chars,
            tasks,
        }
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "suite {} | mode {} | protocol {}",
            self.suite,
            self.mode,
            if self.protocol { "on" } else { "off" }
        );
        let _ = writeln!(out, "{:<36} {:<16} {:>7} {:>5}  {}", "task", "domain", "result", "steps", "detail");
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "{:<36} {:<16} {:>7} {:>5}  {}",
                t.task_id,
                t.domain,
                if t.success { "ok" } else { "FAIL" },
                t.steps,
                t.detail
            );
        }
        let _ = writeln!(out);
        for (d, s) in &self.per_domain {
            let _ = writeln!(out, "{:<16} {}/{} = {:.2}  mean steps {:.1}", d, s.successes, s.tasks, s.success_rate, s.mean_steps);
        }
        let _ = write!(
            out,
            "{:<16} {}/{} = {:.2}  mean steps {:.1}",
            "overall", self.overall.successes, self.overall.tasks, self.overall.success_rate, self.overall.mean_steps
        );
        if let Some(b) = self.mean_belief_chars {
            let _ = write!(out, "  mean belief {b:.0} chars");
        }
        out.push('\n');
        out
    }
}

fn run_one(task: &SuiteTask, kb: &KnowledgeBase, cfg: &BenchConfig) -> Result<TaskResult> {
    let mut env = task.env();
    let out = run_task(&task.goal, &mut env, kb, &cfg.run, &cfg.backend.deps(&cfg.run))?;
    log::info!("{} [{}]: {:?} in {} steps", task.id, cfg.run.ablation_mode, out.status(), out.steps());
    Ok(TaskResult::from_outcome(task, &out))
}

/// Runs every task of `suite` once in `cfg.run.ablation_mode`.
///
/// Under the protocol the store must already be frozen; the tasks then see
/// one immutable snapshot and run sequentially.
pub fn bench(suite: &Suite, store: &AkbStore, cfg: &BenchConfig) -> Result<Report> {
    if cfg.protocol {
        if !store.is_frozen() {
            return Err(Error::Protocol("the knowledge base must be frozen before an evaluation run".into()));
        }
        if cfg.parallel {
            return Err(Error::Protocol("evaluation runs are strictly sequential".into()));
        }
    }
    let kb = store.snapshot();
    let results: Vec<Result<TaskResult>> = if cfg.parallel {
        crate::par::map(&suite.tasks, |t| run_one(t, &kb, cfg))
    } else {
        crate::par::map_sequential(&suite.tasks, |t| run_one(t, &kb, cfg))
    };
    let tasks = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Report::new(&suite.name, cfg.run.ablation_mode, cfg.protocol, tasks))
}

/// [`bench`] once per mode.
pub fn bench_modes(suite: &Suite, store: &AkbStore, cfg: &BenchConfig, modes: &[AblationMode]) -> Result<Vec<Report>> {
    modes
        .iter()
        .map(|&mode| {
            let cfg = BenchConfig { run: RunConfig { ablation_mode: mode, ..cfg.run.clone() }, ..cfg.clone() };
            bench(suite, store, &cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(id: &str, domain: &str, success: bool, steps: usize) -> TaskResult {
        TaskResult {
            task_id: id.into(),
            domain: domain.into(),
            status: if success { RunStatus::Success } else { RunStatus::Failure },
            success,
            steps,
            mean_belief_chars: None,
            trigger: None,
            answer: None,
            detail: String::new(),
        }
    }

    #[test]
    fn seven_of_ten() {
        let tasks: Vec<TaskResult> = (0..10)
            .map(|i| result(&format!("t{i}"), if i < 4 { "shopping" } else { "gitlab" }, i < 7, i + 1))
            .collect();
        let r = Report::new("s", AblationMode::Full, false, tasks);
        assert_eq!(r.overall.success_rate, 0.70);
        assert_eq!(r.overall.mean_steps, 5.5);
        assert_eq!(r.per_domain["shopping"].success_rate, 1.0);
        assert_eq!(r.per_domain["gitlab"].successes, 3);
        assert_eq!(r.per_domain["gitlab"].tasks, 6);
        assert!(r.render_text().contains("overall          7/10 = 0.70"));
    }

    #[test]
    fn empty_suite_has_zero_rates() {
        let r = Report::new("s", AblationMode::Vanilla, false, Vec::new());
        assert_eq!(r.overall.success_rate, 0.0);
        assert!(r.per_domain.is_empty());
    }
}
