use kbagent::akb::{AkbStore, KnowledgeBase};
use kbagent::model::{AblationMode, RunConfig};
use kbagent::orchestrator::{bench, seeded_suite_dir, Backend, BenchConfig, Suite};

fn config(suite: &Suite, mode: AblationMode) -> BenchConfig {
    BenchConfig {
        run: RunConfig { ablation_mode: mode, ..RunConfig::default() },
        protocol: false,
        parallel: false,
        backend: Backend::scripted_for(suite).unwrap(),
    }
}

#[test]
fn mode_success_counts() {
    let suite = Suite::load(seeded_suite_dir()).unwrap();
    assert_eq!(suite.tasks.len(), 12);
    let store = AkbStore::in_memory(KnowledgeBase::seed());
    for (mode, expected) in [
        (AblationMode::Full, 12),
        (AblationMode::NoSummarizer, 10),
        (AblationMode::NoKnowledge, 8),
        (AblationMode::Vanilla, 7),
    ] {
        let report = bench(&suite, &store, &config(&suite, mode)).unwrap();
        println!("{}", report.render_text());
        assert_eq!(report.overall.successes, expected, "{mode}");
    }
}
