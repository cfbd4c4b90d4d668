use std::process::{Command, Output};

fn agent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agent")).args(args).output().unwrap()
}

#[test]
fn run_reports_success_with_exit_zero() {
    let out = agent(&["run", "--task", "map_cmu_zip"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("evaluation: success"), "{stdout}");
    assert!(stdout.contains("answer: 15213"), "{stdout}");
}

#[test]
fn failed_task_exits_one() {
    let out = agent(&["run", "--task", "gitlab_invite_member", "--mode", "no_knowledge"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_task_is_an_error() {
    let out = agent(&["run", "--task", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn bench_writes_json_reports() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    let out = agent(&["bench", "--mode", "full,vanilla", "--json", json.to_str().unwrap()]);
    assert!(out.status.success());
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert_eq!(reports[0]["mode"], "full");
    assert_eq!(reports[0]["overall"]["successes"], 12);
}

#[test]
fn protocol_bench_needs_a_frozen_kb() {
    let dir = tempfile::tempdir().unwrap();
    let akb = dir.path().join("akb.json");
    let akb = akb.to_str().unwrap();
    let seed = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/akb_seed.json");
    assert!(agent(&["akb", "import", seed, "--akb", akb]).status.success());
    assert_eq!(agent(&["bench", "--protocol", "--mode", "full", "--akb", akb]).status.code(), Some(2));
    assert!(agent(&["akb", "freeze", "--akb", akb]).status.success());
    assert!(agent(&["bench", "--protocol", "--mode", "full", "--akb", akb]).status.success());
    assert_eq!(agent(&["akb", "import", seed, "--akb", akb]).status.code(), Some(2));
}
