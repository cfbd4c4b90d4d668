use std::sync::Arc;

use kbagent::akb::{AkbStore, KnowledgeBase};
use kbagent::env::{MockEnv, SiteSpec};
use kbagent::llm::{CassetteClient, LlmClient, ScriptedStub};
use kbagent::model::{AblationMode, RunConfig};
use kbagent::orchestrator::{
    adaptation_loop, bench, run_task, seeded_suite_dir, Backend, BenchConfig, FailureQueue, FailureStatus, RunDeps, Suite,
    TipBook,
};
use kbagent::trace::{read_events, validate_phase_order, Payload, RunStatus, TickClock, Trajectory};
use kbagent::trigger::TriggerSource;
use kbagent::Goal;

fn suite() -> Suite {
    Suite::load(seeded_suite_dir()).unwrap()
}

fn bench_cfg(suite: &Suite, mode: AblationMode) -> BenchConfig {
    BenchConfig {
        run: RunConfig { ablation_mode: mode, ..RunConfig::default() },
        protocol: false,
        parallel: false,
        backend: Backend::scripted_for(suite).unwrap(),
    }
}

const MODES: [AblationMode; 4] =
    [AblationMode::Full, AblationMode::NoSummarizer, AblationMode::NoKnowledge, AblationMode::Vanilla];

#[test]
fn every_trajectory_is_well_ordered_and_capped() {
    let suite = suite();
    let kb = KnowledgeBase::seed();
    for mode in MODES {
        let cfg = RunConfig { ablation_mode: mode, ..RunConfig::default() };
        let backend = Backend::scripted_for(&suite).unwrap();
        for task in &suite.tasks {
            let out = run_task(&task.goal, &mut task.env(), &kb, &cfg, &backend.deps(&cfg)).unwrap();
            validate_phase_order(out.trajectory.events()).unwrap_or_else(|e| panic!("{mode} {}: {e}", task.id));
            assert!(out.steps() <= 30, "{mode} {}: {} steps", task.id, out.steps());
            assert_ne!(out.status(), RunStatus::Running);
        }
    }
}

#[test]
fn ablations_hide_exactly_their_component() {
    let suite = suite();
    let kb = KnowledgeBase::seed();
    let task = suite.task("shopping_last_order_total").unwrap();
    for mode in MODES {
        let cfg = RunConfig { ablation_mode: mode, ..RunConfig::default() };
        let backend = Backend::scripted_for(&suite).unwrap();
        let out = run_task(&task.goal, &mut task.env(), &kb, &cfg, &backend.deps(&cfg)).unwrap();
        let events = out.trajectory.events();
        let tips: usize = events
            .iter()
            .map(|e| match &e.payload {
                Payload::Retrieved(k) => k.len(),
                _ => 0,
            })
            .sum();
        let beliefs = events.iter().filter(|e| matches!(e.payload, Payload::Belief(_))).count();
        let digests = events.iter().filter(|e| matches!(e.payload, Payload::HistoryDigest { .. })).count();
        assert_eq!(tips > 0, mode.uses_knowledge(), "{mode}");
        assert_eq!(beliefs > 0, mode.uses_summarizer(), "{mode}");
        assert_eq!(digests > 0, !mode.uses_summarizer(), "{mode}");
    }
}

#[test]
fn recorded_trajectory_replays_identically() {
    let suite = suite();
    let dir = tempfile::tempdir().unwrap();
    let task = suite.task("shop_admin_add_color_variant").unwrap();
    let cfg = RunConfig { record_dir: Some(dir.path().to_path_buf()), ..RunConfig::default() };
    let backend = Backend::scripted_for(&suite).unwrap();
    let out = run_task(&task.goal, &mut task.env(), &KnowledgeBase::seed(), &cfg, &backend.deps(&cfg)).unwrap();
    let record = out.record_dir.clone().unwrap();
    let events = read_events(&record.join("trajectory.jsonl")).unwrap();
    let replayed = Trajectory::replay(&task.goal.id, events).unwrap();
    assert_eq!(replayed.events(), out.trajectory.events());
}

#[test]
fn one_transient_fault_leaves_the_final_state_unchanged() {
    let suite = suite();
    let kb = KnowledgeBase::seed();
    let task = suite.task("shop_admin_add_color_variant").unwrap();
    let cfg = RunConfig::default();
    let backend = Backend::scripted_for(&suite).unwrap();

    let baseline = run_task(&task.goal, &mut task.env(), &kb, &cfg, &backend.deps(&cfg)).unwrap();
    assert!(baseline.eval.success);
    let calls = {
        let mut env = task.env();
        run_task(&task.goal, &mut env, &kb, &cfg, &backend.deps(&cfg)).unwrap();
        env.calls()
    };
    for at in 1..calls {
        let mut env = task.env();
        env.inject_faults(at, 1);
        let out = run_task(&task.goal, &mut env, &kb, &cfg, &backend.deps(&cfg)).unwrap();
        assert_eq!(out.final_state, baseline.final_state, "fault at call {at}");
        assert!(out.eval.success, "fault at call {at}: {}", out.eval.detail);
    }
}

#[test]
fn exhausted_retries_abort_without_panicking() {
    let suite = suite();
    let task = suite.task("gitlab_open_issue_count").unwrap();
    let cfg = RunConfig { watchdog_retries: 2, ..RunConfig::default() };
    let backend = Backend::scripted_for(&suite).unwrap();
    let mut env = task.env();
    env.inject_faults(2, 1_000);
    let out = run_task(&task.goal, &mut env, &KnowledgeBase::seed(), &cfg, &backend.deps(&cfg)).unwrap();
    assert_eq!(out.status(), RunStatus::Aborted);
    assert!(!out.eval.success);
    assert!(out.abort_reason.is_some());
    validate_phase_order(out.trajectory.events()).unwrap();
}

fn ping_pong_site() -> MockEnv {
    let spec: SiteSpec = serde_json::from_value(serde_json::json!({
        "v": 1, "site_id": "pp", "domain_label": "shopping", "initial_page": "a",
        "pages": [
            {"id": "a", "url": "http://pp.test/left/list", "title": "Left",
             "elements": [{"bid": "1", "role": "link", "name": "go right"}],
             "transitions": [{"on": "click(\"1\")", "to": "b", "effects": [{"inc": {"var": "hops", "by": 1}}]}]},
            {"id": "b", "url": "http://pp.test/right/list", "title": "Right",
             "elements": [{"bid": "2", "role": "link", "name": "go left"}],
             "transitions": [{"on": "click(\"2\")", "to": "a", "effects": [{"inc": {"var": "hops", "by": 1}}]}]}
        ]
    }))
    .unwrap();
    MockEnv::new(spec).unwrap()
}

#[test]
fn belief_stays_within_budget_over_a_long_run() {
    let stub: Arc<dyn LlmClient> = Arc::new(ScriptedStub::from_rules(
        serde_json::from_value(serde_json::json!([
            {"match": "URL: http://pp.test/left/list\n",
             "reply": "<think>Cross over and write down the count of visits so far in a long note.</think>\n<action>click(\"1\")</action>"},
            {"match": "URL: http://pp.test/right/list\n",
             "reply": "<think>Go back.</think>\n<action>click(\"2\")</action>"}
        ]))
        .unwrap(),
    ));
    let cfg = RunConfig { max_steps: 200, ..RunConfig::default() };
    let deps = RunDeps::offline(stub).with_clock(Arc::new(TickClock::default()));
    let goal = Goal::new("pp", "Walk between the two lists for as long as allowed while tracking every visit.");
    let out = run_task(&goal, &mut ping_pong_site(), &KnowledgeBase::seed(), &cfg, &deps).unwrap();

    assert_eq!(out.steps(), 200);
    assert_eq!(out.verdict.as_ref().and_then(|v| v.source), Some(TriggerSource::RuleBudget));
    let sizes: Vec<usize> = out.trajectory.beliefs().map(|b| b.render().chars().count()).collect();
    assert_eq!(sizes.len(), 200);
    let max = *sizes.iter().max().unwrap();
    assert!(max <= 4096, "largest belief {max} chars");
    // The history keeps growing, so the cap must actually have been reached.
    assert!(max > 3_500, "run never came near the budget ({max} chars)");
    for b in out.trajectory.beliefs() {
        assert_eq!(b.char_len, b.render().chars().count());
    }
}

#[test]
fn parallel_bench_matches_sequential() {
    let suite = suite();
    let store = AkbStore::in_memory(KnowledgeBase::seed());
    for mode in MODES {
        let seq = bench(&suite, &store, &bench_cfg(&suite, mode)).unwrap();
        let par = bench(&suite, &store, &BenchConfig { parallel: true, ..bench_cfg(&suite, mode) }).unwrap();
        assert_eq!(seq, par, "{mode}");
        let again = bench(&suite, &store, &bench_cfg(&suite, mode)).unwrap();
        assert_eq!(seq, again, "{mode}");
    }
}

#[test]
fn cassette_replay_reproduces_the_report() {
    let suite = suite();
    let store = AkbStore::in_memory(KnowledgeBase::seed());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.cassette.jsonl");
    let stub: Arc<dyn LlmClient> = Arc::new(ScriptedStub::new((*suite.stub.clone().unwrap()).clone()));
    let recorder: Arc<dyn LlmClient> = Arc::new(CassetteClient::record(&path, stub).unwrap());
    let with = |client: Arc<dyn LlmClient>| BenchConfig {
        backend: Backend::Client { client, model_summarizer: false },
        ..bench_cfg(&suite, AblationMode::Full)
    };
    let recorded = bench(&suite, &store, &with(recorder)).unwrap();
    let replayer: Arc<dyn LlmClient> = Arc::new(CassetteClient::replay(&path).unwrap());
    let replayed = bench(&suite, &store, &with(replayer)).unwrap();
    assert_eq!(recorded.tasks, replayed.tasks);
    assert_eq!(recorded.overall.successes, 12);
}

#[test]
fn reviewed_failure_is_resolved_by_the_injected_tip() {
    let suite = suite();
    let task = suite.task("shop_admin_add_color_variant").unwrap().clone();
    let mut kb = KnowledgeBase::seed();
    let tip = kb.remove_tip("a03").unwrap();
    let store = AkbStore::in_memory(kb);
    let queue = FailureQueue::in_memory();
    let cfg = RunConfig::default();
    let backend = Backend::scripted_for(&suite).unwrap();

    // Without the tip the run loops and nobody answers: the failure waits.
    let report = adaptation_loop(std::slice::from_ref(&task), &store, &queue, &mut kbagent::orchestrator::NoExpert, &cfg, &backend)
        .unwrap();
    assert_eq!(report.initial_successes, 0);
    assert_eq!(report.enqueued.len(), 1);
    let entry = queue.get(&report.enqueued[0]).unwrap();
    assert_eq!(entry.verdict.source, Some(TriggerSource::RuleLoop));
    assert_eq!(entry.status, FailureStatus::Open);

    // The expert writes the tip; the re-run succeeds and the entry closes.
    let mut book = TipBook::default();
    book.tips.insert(task.id.clone(), vec![tip]);
    let queue = FailureQueue::in_memory();
    let report = adaptation_loop(std::slice::from_ref(&task), &store, &queue, &mut book, &cfg, &backend).unwrap();
    assert_eq!(report.injected, vec!["a03".to_string()]);
    assert_eq!(report.resolved.len(), 1);
    assert!(report.unresolved.is_empty());
    let entry = queue.get(&report.resolved[0].failure_id).unwrap();
    assert_eq!(entry.status, FailureStatus::Resolved);
    assert!(store.snapshot().get("a03").unwrap().source_failure_id.is_some());
}
