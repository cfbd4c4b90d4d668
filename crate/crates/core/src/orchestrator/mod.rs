//! Wiring of the online loop, the expert adaptation loop and the benchmark
//! harness.
//!
//! - [`run_task`] executes one goal against one environment.
//! - [`adaptation_loop`] runs a task set, queues triggered failures for expert
//!   review and re-tests after injecting the tips the expert writes.
//! - [`bench()`] runs a suite in one ablation mode and aggregates a [`Report`].

mod adapt;
mod bench;
mod queue;
mod run;
mod suite;

pub use adapt::{adaptation_loop, inject_and_retest, AdaptReport, Expert, NoExpert, RejectedTip, ResolvedFailure, Retest, TipBook};
pub use bench::{bench, bench_modes, Backend, BenchConfig, Report, Stats, TaskResult, REPORT_VERSION};
pub use queue::{FailureEntry, FailureQueue, FailureStatus, Resolution, QUEUE_VERSION};
pub use run::{new_run_id, run_task, run_task_in_mode, RunDeps, RunOutcome};
pub use suite::{seeded_suite_dir, Suite, SuiteManifest, SuiteTask, TaskEntry, MANIFEST, SUITE_VERSION};
