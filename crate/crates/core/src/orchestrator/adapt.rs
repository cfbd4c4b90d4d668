use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::bench::Backend;
use super::queue::{FailureEntry, FailureQueue, Resolution};
use super::run::{run_task, RunOutcome};
use super::suite::SuiteTask;
use crate::akb::{AkbError, AkbStore, KnowledgeTip};
use crate::env::Environment;
use crate::model::RunConfig;
use crate::{Error, Result};

/// Whoever reviews failures and writes tips: a person behind the workbench,
/// a file of prepared tips, or nobody (failures just wait in the queue).
pub trait Expert {
    fn review(&mut self, failure: &FailureEntry, outcome: &RunOutcome) -> Vec<KnowledgeTip>;
}

/// Leaves every failure in the queue for later review.
pub struct NoExpert;

impl Expert for NoExpert {
    fn review(&mut self, _: &FailureEntry, _: &RunOutcome) -> Vec<KnowledgeTip> {
        Vec::new()
    }
}

/// Prepared tips keyed by task id, each handed out once.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TipBook {
    pub tips: BTreeMap<String, Vec<KnowledgeTip>>,
}

impl Expert for TipBook {
    fn review(&mut self, failure: &FailureEntry, _: &RunOutcome) -> Vec<KnowledgeTip> {
        let key = failure.task_id.as_deref().unwrap_or(&failure.goal.id);
        self.tips.remove(key).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedTip {
    pub failure_id: String,
    pub tip_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedFailure {
    pub failure_id: String,
    pub task_id: String,
    pub tip_ids: Vec<String>,
    pub rerun_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub tasks: usize,
    pub initial_successes: usize,
    /// Queue ids of the failures this pass enqueued.
    pub enqueued: Vec<String>,
    pub injected: Vec<String>,
    pub rejected: Vec<RejectedTip>,
    pub resolved: Vec<ResolvedFailure>,
    /// Enqueued failures still open at the end of the pass.
    pub unresolved: Vec<String>,
}

/// Outcome of injecting tips for one failure and re-running its task.
#[derive(Debug)]
pub struct Retest {
    pub injected: Vec<String>,
    pub rejected: Vec<(String, String)>,
    pub outcome: Option<RunOutcome>,
}

/// Adds `tips` one by one (invalid or duplicate ones are rejected, the rest
/// stay in), re-runs the task if anything went in, and resolves the queue
/// entry when the re-run succeeds.
pub fn inject_and_retest(
    failure: &FailureEntry,
    tips: Vec<KnowledgeTip>,
    env: &mut dyn Environment,
    store: &AkbStore,
    queue: &FailureQueue,
    cfg: &RunConfig,
    backend: &Backend,
) -> Result<Retest> {
    let mut injected = Vec::new();
    let mut rejected = Vec::new();
    for mut tip in tips {
        if tip.source_failure_id.is_none() {
            tip.source_failure_id = Some(failure.id.clone());
        }
        let id = tip.id.clone();
        match store.add_tip(tip) {
            Ok(()) => injected.push(id),
            Err(Error::Akb(AkbError::Frozen)) => return Err(Error::Akb(AkbError::Frozen)),
            Err(e @ Error::Akb(_)) => rejected.push((id, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if injected.is_empty() {
        return Ok(Retest { injected, rejected, outcome: None });
    }
    let kb = store.snapshot();
    let outcome = run_task(&failure.goal, env, &kb, cfg, &backend.deps(cfg))?;
    if outcome.eval.success {
        queue.resolve(
            &failure.id,
            Resolution {
                tip_ids: injected.clone(),
                rerun_id: Some(outcome.run_id.clone()),
                rerun_success: Some(true),
                note: String::new(),
                resolved_at: String::new(),
            },
        )?;
    }
    Ok(Retest { injected, rejected, outcome: Some(outcome) })
}

/// The offline adaptation pass: run each task, queue the ones a trigger
/// stopped, let the expert answer with tips, inject them and re-test.
pub fn adaptation_loop(
    tasks: &[SuiteTask],
    store: &AkbStore,
    queue: &FailureQueue,
    expert: &mut dyn Expert,
    cfg: &RunConfig,
    backend: &Backend,
) -> Result<AdaptReport> {
    if store.is_frozen() {
        return Err(Error::Akb(AkbError::Frozen));
    }
    let mut report = AdaptReport { tasks: tasks.len(), ..AdaptReport::default() };
    for task in tasks {
        let kb = store.snapshot();
        let mut env = task.env();
        let outcome = run_task(&task.goal, &mut env, &kb, cfg, &backend.deps(cfg))?;
        if outcome.eval.success {
            report.initial_successes += 1;
            continue;
        }
        let Some(verdict) = outcome.verdict.as_ref().filter(|v| v.fired) else {
            log::info!("{}: failed without a trigger verdict ({}); not queued", task.id, outcome.eval.detail);
            continue;
        };
        let entry = queue.enqueue(&outcome.run_id, &task.goal, &task.site.site_id, Some(&task.id), verdict)?;
        report.enqueued.push(entry.id.clone());

        let tips = expert.review(&entry, &outcome);
        if tips.is_empty() {
            report.unresolved.push(entry.id);
            continue;
        }
        let mut env = task.env();
        let retest = inject_and_retest(&entry, tips, &mut env, store, queue, cfg, backend)?;
        report.injected.extend(retest.injected.iter().cloned());
        report.rejected.extend(retest.rejected.into_iter().map(|(tip_id, reason)| RejectedTip {
            failure_id: entry.id.clone(),
            tip_id,
            reason,
        }));
        match retest.outcome {
            Some(o) if o.eval.success => report.resolved.push(ResolvedFailure {
                failure_id: entry.id,
                task_id: task.id.clone(),
                tip_ids: retest.injected,
                rerun_id: o.run_id,
            }),
            _ => report.unresolved.push(entry.id),
        }
    }
    Ok(report)
}
