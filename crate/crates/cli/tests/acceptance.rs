//! End-to-end acceptance checks. Each check prints one `PASS` or `FAIL` line;
//! the test fails if any check fails. Run with `--nocapture` to see the list:
//!
//! ```text
//! cargo test -p kbagent-cli --test acceptance -- --nocapture
//! ```

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use kbagent::action::{eval_calculate, parse_action, CalcError};
use kbagent::akb::{AkbStore, KnowledgeBase};
use kbagent::env::{MockEnv, SiteSpec};
use kbagent::llm::{LlmClient, ScriptedStub};
use kbagent::model::{AblationMode, RunConfig};
use kbagent::orchestrator::{
    bench, run_task, seeded_suite_dir, AdaptReport, Backend, BenchConfig, FailureQueue, FailureStatus, Report, RunDeps, Suite,
    TipBook,
};
use kbagent::trace::{validate_phase_order, Payload, RunStatus, TickClock, Trajectory};
use kbagent::trigger::{action_pairs, evaluate_rules, TriggerConfig, TriggerSource};
use kbagent::Goal;
use kbagent_service::{router, ServiceState};
use kbagent_testkit::{gen, oracle, rng};
use rand::Rng as _;
use serde_json::json;
use tower::ServiceExt;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn suite() -> Suite {
    Suite::load(seeded_suite_dir()).expect("seeded suite loads")
}

fn agent(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_agent")).args(args).output().expect("agent binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.success(), text)
}

fn seed_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/akb_seed.json")
}

// ---------------------------------------------------------------------------

fn grammar_round_trip() -> Result<String, String> {
    let start = Instant::now();
    let mut r = rng(101);
    for case in 0..5_000 {
        let a = gen::action(&mut r);
        let printed = a.to_string();
        let back = parse_action(&printed).map_err(|e| format!("case {case}: {printed:?}: {e}"))?;
        ensure(back == a, || format!("case {case}: {printed:?} came back as {back:?}"))?;
    }
    for case in 0..1_000 {
        let tree = gen::calc_tree(&mut r, 4);
        let src = tree.render();
        match (tree.eval(), eval_calculate(&src)) {
            (Some(want), Ok(got)) if want.to_bits() == got.to_bits() => {}
            (None, Err(CalcError::DivisionByZero)) => {}
            (want, got) => return Err(format!("calc case {case}: {src}: oracle {want:?}, calculator {got:?}")),
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(5), || format!("took {took:?}"))?;
    Ok(format!("5000 actions + 1000 expressions in {:.2}s", took.as_secs_f64()))
}

fn seed_fidelity() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let akb = dir.path().join("akb.json");
    let akb = akb.to_str().unwrap();
    let (ok, out) = agent(&["akb", "import", seed_file().to_str().unwrap(), "--akb", akb]);
    ensure(ok, || format!("import failed: {out}"))?;
    let (ok, out) = agent(&["akb", "stats", "--akb", akb]);
    ensure(ok, || format!("stats failed: {out}"))?;
    let counts: BTreeMap<&str, usize> = out
        .lines()
        .filter_map(|l| l.split_once(": "))
        .filter_map(|(k, v)| v.trim().parse().ok().map(|n| (k, n)))
        .collect();
    let want: BTreeMap<&str, usize> =
        [("gitlab", 13), ("map", 7), ("reddit", 5), ("shopping", 9), ("shopping_admin", 18), ("total", 52)].into();
    ensure(counts == want, || format!("got {counts:?}"))?;
    Ok("gitlab 13, map 7, reddit 5, shopping 9, shopping_admin 18; total 52".into())
}

fn retrieval_equivalence() -> Result<String, String> {
    let mut r = rng(103);
    for case in 0..1_000 {
        let n = r.gen_range(0..=100);
        let kb = gen::kb(&mut r, n);
        let (obs, goal) = gen::query(&mut r);
        let limit = r.gen_range(1..=8);
        let got = kb.retrieve(&obs, &goal, limit);
        let flat: Vec<oracle::Ranked> =
            got.items.iter().map(|i| oracle::Ranked { id: i.tip.id.clone(), stage: i.stage, score: i.score }).collect();
        let want = oracle::retrieve(&kb, &obs, &goal, limit);
        ensure(flat == want, || format!("case {case}: cascade {flat:?} vs scan {want:?}"))?;
        let stages: Vec<_> = got.items.iter().map(|i| i.stage).collect();
        ensure(oracle::stages_ordered(&stages), || format!("case {case}: stage order {stages:?}"))?;
    }
    Ok("1000 random (kb, query) pairs agree with the linear scan".into())
}

fn belief_budget() -> Result<String, String> {
    let spec: SiteSpec = serde_json::from_value(json!({
        "v": 1, "site_id": "pp", "domain_label": "shopping", "initial_page": "a",
        "pages": [
            {"id": "a", "url": "http://pp.test/left/list", "title": "Left",
             "elements": [{"bid": "1", "role": "link", "name": "go right"}],
             "transitions": [{"on": "click(\"1\")", "to": "b"}]},
            {"id": "b", "url": "http://pp.test/right/list", "title": "Right",
             "elements": [{"bid": "2", "role": "link", "name": "go left"}],
             "transitions": [{"on": "click(\"2\")", "to": "a"}]}
        ]
    }))
    .map_err(|e| e.to_string())?;
    let stub: Arc<dyn LlmClient> = Arc::new(ScriptedStub::from_rules(
        serde_json::from_value(json!([
            {"match": "URL: http://pp.test/left/list\n", "reply": "<think>Over.</think>\n<action>click(\"1\")</action>"},
            {"match": "URL: http://pp.test/right/list\n", "reply": "<think>Back.</think>\n<action>click(\"2\")</action>"}
        ]))
        .map_err(|e| e.to_string())?,
    ));
    let cfg = RunConfig { max_steps: 200, ..RunConfig::default() };
    let deps = RunDeps::offline(stub).with_clock(Arc::new(TickClock::default()));
    let goal = Goal::new("pp", "Keep switching between the two lists.");
    let mut env = MockEnv::new(spec).map_err(|e| e.to_string())?;
    let out = run_task(&goal, &mut env, &KnowledgeBase::seed(), &cfg, &deps).map_err(|e| e.to_string())?;
    let sizes: Vec<usize> = out.trajectory.beliefs().map(|b| b.render().chars().count()).collect();
    ensure(sizes.len() == 200, || format!("{} belief states", sizes.len()))?;
    let max = sizes.iter().copied().max().unwrap_or(0);
    ensure(max <= 4096, || format!("belief reached {max} chars"))?;
    Ok(format!("200 steps, largest belief {max} chars"))
}

fn trace_conformance() -> Result<String, String> {
    let suite = suite();
    let kb = KnowledgeBase::seed();
    let mut runs = 0;
    let mut longest = 0;
    for mode in AblationMode::ALL {
        let cfg = RunConfig { ablation_mode: mode, ..RunConfig::default() };
        let backend = Backend::scripted_for(&suite).map_err(|e| e.to_string())?;
        for task in &suite.tasks {
            let out = run_task(&task.goal, &mut task.env(), &kb, &cfg, &backend.deps(&cfg)).map_err(|e| e.to_string())?;
            validate_phase_order(out.trajectory.events()).map_err(|e| format!("{mode} {}: {e}", task.id))?;
            ensure(out.steps() <= 30, || format!("{mode} {}: {} steps", task.id, out.steps()))?;
            longest = longest.max(out.steps());
            runs += 1;
        }
    }
    Ok(format!("{runs} trajectories well-ordered, longest {longest} steps"))
}

fn trigger_correctness() -> Result<String, String> {
    let suite = suite();
    let task = suite.task("shop_admin_add_color_variant").ok_or("missing fixture")?;
    let cfg = RunConfig { ablation_mode: AblationMode::NoKnowledge, ..RunConfig::default() };
    let backend = Backend::scripted_for(&suite).map_err(|e| e.to_string())?;
    let out = run_task(&task.goal, &mut task.env(), &KnowledgeBase::seed(), &cfg, &backend.deps(&cfg)).map_err(|e| e.to_string())?;
    let verdict = out.verdict.clone().ok_or("no verdict")?;
    ensure(verdict.source == Some(TriggerSource::RuleLoop), || format!("fired {:?}", verdict.source))?;
    let pairs = action_pairs(&out.trajectory);
    // The first prefix of the trajectory whose last three pairs are identical.
    let first = (1..=pairs.len())
        .find_map(|n| oracle::loop_window(&pairs[..n], 3))
        .ok_or("the trajectory never repeats three times")?;
    ensure(verdict.evidence == first, || format!("evidence {:?}, expected {first:?}", verdict.evidence))?;
    let fired_at = out
        .trajectory
        .events()
        .iter()
        .find(|e| matches!(e.payload, Payload::Trigger(ref v) if v.fired))
        .map(|e| e.step)
        .ok_or("no trigger event")?;
    ensure(Some(&fired_at) == first.last(), || format!("fired at step {fired_at}, third repeat at {first:?}"))?;

    let tcfg = TriggerConfig { parse_failure_limit: 1_000, ..TriggerConfig::default() };
    let mut r = rng(106);
    for case in 0..500 {
        let len = r.gen_range(1..25);
        let steps = gen::synthetic_steps(&mut r, len);
        let mut traj = Trajectory::new("g");
        for (i, s) in steps.iter().enumerate() {
            let obs = gen::append_step(&mut traj, i as u32, s);
            let v = evaluate_rules(&obs, &traj, &tcfg, 10_000);
            let want = oracle::loop_window(&action_pairs(&traj), tcfg.loop_window);
            let fired = v.fired && v.source == Some(TriggerSource::RuleLoop);
            ensure(fired == want.is_some(), || format!("case {case} step {i}: rule {fired}, oracle {want:?}"))?;
            if fired {
                ensure(Some(&v.evidence) == want.as_ref(), || format!("case {case}: evidence {:?}", v.evidence))?;
                break;
            }
        }
    }
    Ok(format!("fixture loop fires at step {fired_at} (window {first:?}); 500 random trajectories agree"))
}

fn frozen_protocol() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Arc::new(AkbStore::in_memory(KnowledgeBase::seed()));
    let queue = Arc::new(FailureQueue::open(dir.path().join("queue.json")).map_err(|e| e.to_string())?);
    let verdict = kbagent::TriggerVerdict::fire(TriggerSource::RuleLoop, "repeat", vec![0, 1, 2]);
    let open = queue.enqueue("r", &Goal::new("t", "x"), "s", Some("t"), &verdict).map_err(|e| e.to_string())?.id;
    let state = ServiceState::new(store.clone(), queue.clone(), dir.path()).with_token("t0k").with_protocol().map_err(|e| e.to_string())?;
    let app = router(Arc::new(state));
    let tips_before = store.export();
    let queue_before = queue.list().map_err(|e| e.to_string())?;
    let tip = |id: &str| {
        let mut t = serde_json::to_value(tips_before.tips[0].clone()).unwrap();
        t["id"] = json!(id);
        t
    };

    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().map_err(|e| e.to_string())?;
    let mut mutations = 0;
    let mut writes = 0;
    for i in 0..50 {
        let (method, uri, body) = match i % 6 {
            0 => (Method::POST, "/tips".to_string(), Some(tip(&format!("new{i}")))),
            1 => (Method::PUT, format!("/tips/{}", tips_before.tips[i % 52].id), Some(tip(&tips_before.tips[i % 52].id))),
            2 => (Method::DELETE, format!("/tips/{}", tips_before.tips[i % 52].id), None),
            3 => (Method::POST, format!("/failures/{open}/resolve"), Some(json!({"note": "n"}))),
            4 => (Method::GET, "/tips".to_string(), None),
            _ => (Method::GET, "/failures".to_string(), None),
        };
        let is_write = method != Method::GET;
        let mut req = Request::builder().method(method).uri(&uri).header("authorization", "Bearer t0k");
        if body.is_some() {
            req = req.header("content-type", "application/json");
        }
        let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
        let status = rt.block_on(app.clone().oneshot(req)).map_err(|e| e.to_string())?.status();
        if is_write {
            writes += 1;
            if status.is_success() {
                mutations += 1;
            }
            ensure(status == StatusCode::CONFLICT, || format!("{uri}: {status}"))?;
        }
    }
    ensure(mutations == 0, || format!("{mutations} writes succeeded"))?;
    ensure(store.export() == tips_before, || "tip set changed".into())?;
    ensure(queue.list().map_err(|e| e.to_string())? == queue_before, || "queue changed".into())?;
    Ok(format!("50 calls ({writes} writes), 0 successful mutations"))
}

fn directional_ablation() -> Result<String, String> {
    let start = Instant::now();
    let suite = suite();
    let store = AkbStore::in_memory(KnowledgeBase::seed());
    let backend = Backend::scripted_for(&suite).map_err(|e| e.to_string())?;
    let run = |mode| -> Result<Report, String> {
        let cfg = BenchConfig {
            run: RunConfig { ablation_mode: mode, ..RunConfig::default() },
            protocol: false,
            parallel: false,
            backend: backend.clone(),
        };
        bench(&suite, &store, &cfg).map_err(|e| e.to_string())
    };
    let full = run(AblationMode::Full)?;
    let no_sum = run(AblationMode::NoSummarizer)?;
    let no_kb = run(AblationMode::NoKnowledge)?;
    ensure(run(AblationMode::Full)? == full, || "full mode is not deterministic".into())?;
    ensure(run(AblationMode::NoKnowledge)? == no_kb, || "no_knowledge mode is not deterministic".into())?;

    let (f, s, k) = (full.overall.successes, no_sum.overall.successes, no_kb.overall.successes);
    ensure(f >= s && f >= k, || format!("full {f}, no_summarizer {s}, no_knowledge {k}"))?;
    let gated = |r: &Report| {
        r.tasks
            .iter()
            .filter(|t| suite.task(&t.task_id).is_some_and(|st| st.has_tag("needs_knowledge")) && t.success)
            .count()
    };
    let gated_tasks = suite.tasks.iter().filter(|t| t.has_tag("needs_knowledge")).count();
    ensure(gated_tasks > 0, || "no knowledge-gated tasks in the suite".into())?;
    ensure(gated(&full) > gated(&no_kb), || format!("gated: full {}, no_knowledge {}", gated(&full), gated(&no_kb)))?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!(
        "full {f}/12, no_summarizer {s}/12, no_knowledge {k}/12; gated {}/{gated_tasks} vs {}/{gated_tasks}; {:.2}s",
        gated(&full),
        gated(&no_kb),
        took.as_secs_f64()
    ))
}

fn watchdog_recovery() -> Result<String, String> {
    let suite = suite();
    let kb = KnowledgeBase::seed();
    let task = suite.task("shop_admin_add_color_variant").ok_or("missing fixture")?;
    let cfg = RunConfig::default();
    let backend = Backend::scripted_for(&suite).map_err(|e| e.to_string())?;
    let mut env = task.env();
    let baseline = run_task(&task.goal, &mut env, &kb, &cfg, &backend.deps(&cfg)).map_err(|e| e.to_string())?;
    let calls = env.calls();
    for at in [1, calls / 2, calls - 1] {
        let mut env = task.env();
        env.inject_faults(at, 1);
        let out = run_task(&task.goal, &mut env, &kb, &cfg, &backend.deps(&cfg)).map_err(|e| e.to_string())?;
        ensure(out.final_state == baseline.final_state, || format!("fault at call {at}: state differs"))?;
    }
    let mut env = task.env();
    env.inject_faults(3, u64::MAX / 2);
    let out = run_task(&task.goal, &mut env, &kb, &cfg, &backend.deps(&cfg)).map_err(|e| e.to_string())?;
    ensure(out.status() == RunStatus::Aborted, || format!("status {:?}", out.status()))?;
    Ok(format!("faults at calls 1, {}, {} recovered; exhaustion ends Aborted", calls / 2, calls - 1))
}

fn hitl_round_trip() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut kb = KnowledgeBase::seed();
    let tip = kb.remove_tip("a03").map_err(|e| e.to_string())?;
    let akb = dir.path().join("akb.json");
    std::fs::write(&akb, serde_json::to_string(&kb.to_document()).unwrap()).map_err(|e| e.to_string())?;
    let mut book = TipBook::default();
    book.tips.insert("shop_admin_add_color_variant".into(), vec![tip]);
    let tips = dir.path().join("tips.json");
    std::fs::write(&tips, serde_json::to_string(&book).unwrap()).map_err(|e| e.to_string())?;
    let queue = dir.path().join("queue.json");
    let (akb, tips, queue_s) = (akb.to_str().unwrap(), tips.to_str().unwrap(), queue.to_str().unwrap());
    let task = "shop_admin_add_color_variant";

    let (ok, out) = agent(&["run", "--task", task, "--akb", akb]);
    ensure(!ok, || format!("run without the tip should fail: {out}"))?;

    let (ok, out) = agent(&["adapt", "--akb", akb, "--queue", queue_s, "--tips", tips, "--task", task]);
    ensure(ok, || format!("adapt failed: {out}"))?;
    let report: AdaptReport = serde_json::from_str(&out).map_err(|e| format!("{e}: {out}"))?;
    ensure(report.enqueued.len() == 1, || format!("enqueued {:?}", report.enqueued))?;
    ensure(report.injected == ["a03"], || format!("injected {:?}", report.injected))?;
    ensure(report.resolved.len() == 1, || format!("resolved {:?}", report.resolved))?;
    let entries = FailureQueue::open(&queue).and_then(|q| q.list()).map_err(|e| e.to_string())?;
    ensure(entries.len() == 1 && entries[0].status == FailureStatus::Resolved, || format!("{entries:?}"))?;

    let (ok, out) = agent(&["run", "--task", task, "--akb", akb]);
    ensure(ok, || format!("re-run after injection failed: {out}"))?;
    Ok(format!("loop queued as {}, tip a03 injected, re-run succeeds", report.enqueued[0]))
}

#[test]
fn acceptance() {
    let checks: [(&str, Check); 10] = [
        ("action grammar round-trip", grammar_round_trip),
        ("seed corpus fidelity", seed_fidelity),
        ("retrieval oracle equivalence", retrieval_equivalence),
        ("belief budget", belief_budget),
        ("trace conformance", trace_conformance),
        ("trigger correctness", trigger_correctness),
        ("frozen protocol enforcement", frozen_protocol),
        ("directional ablation", directional_ablation),
        ("watchdog recovery", watchdog_recovery),
        ("expert round-trip", hitl_round_trip),
    ];
    let mut failed = Vec::new();
    println!();
    for (i, (name, check)) in checks.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL {:>2} {name}: {why}", i + 1);
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
