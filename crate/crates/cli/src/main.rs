use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kbagent::akb::{AkbDocument, AkbStore, KnowledgeBase, KnowledgeTip};
use kbagent::llm::{CassetteClient, LlmClient, OpenAiClient, ScriptedStub};
use kbagent::model::{AblationMode, LlmConfig, RunConfig};
use kbagent::orchestrator::{
    adaptation_loop, bench_modes, run_task, Backend, BenchConfig, Expert, FailureQueue, NoExpert, Report, Suite, TipBook,
};
use kbagent_service::ServiceState;

#[derive(Parser)]
#[command(name = "agent", version, about = "Knowledge-guided browser agent")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one suite task and print the outcome.
    Run(RunArgs),
    /// Run a suite in one or more ablation modes and report success rates.
    Bench(BenchArgs),
    /// Run tasks, queue triggered failures, inject expert tips and re-test.
    Adapt(AdaptArgs),
    /// Serve the workbench HTTP API.
    Serve(ServeArgs),
    /// Manage a knowledge-base file.
    Akb {
        #[command(subcommand)]
        cmd: AkbCommand,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Suite directory containing suite.json.
    #[arg(long, default_value_os_t = kbagent::orchestrator::seeded_suite_dir())]
    suite: PathBuf,
    /// Knowledge-base file; the shipped seed corpus when omitted.
    #[arg(long)]
    akb: Option<PathBuf>,
    /// Run configuration (JSON); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory that receives runs/<run_id>/ trajectories.
    #[arg(long)]
    record_dir: Option<PathBuf>,
    /// Call the configured OpenAI-compatible endpoint (AGENT_LLM_* env vars).
    #[arg(long, conflicts_with = "replay")]
    live: bool,
    /// Serve model replies from a cassette; misses are errors.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Record every model exchange into this cassette.
    #[arg(long, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Route the summary model through the LLM client as well.
    #[arg(long)]
    model_summarizer: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    task: String,
    #[arg(long, default_value = "full")]
    mode: AblationMode,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Modes to run; all four when omitted.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<AblationMode>,
    /// Evaluation protocol: requires a frozen kb and sequential execution.
    #[arg(long)]
    protocol: bool,
    #[arg(long, conflicts_with = "protocol")]
    parallel: bool,
    /// Write the reports as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    queue: PathBuf,
    /// Prepared tips keyed by task id (`{"tips": {"task": [tip, ...]}}`).
    #[arg(long)]
    tips: Option<PathBuf>,
    /// Only these tasks.
    #[arg(long, value_delimiter = ',')]
    task: Vec<String>,
    #[arg(long, default_value = "full")]
    mode: AblationMode,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Directory holding runs/, the queue and the audit log.
    #[arg(long, default_value = "agent-data")]
    data: PathBuf,
    #[arg(long)]
    queue: Option<PathBuf>,
    /// Shared API token; falls back to AGENT_API_TOKEN.
    #[arg(long, env = "AGENT_API_TOKEN")]
    token: Option<String>,
    /// Freeze the kb and refuse every mutation.
    #[arg(long)]
    protocol: bool,
}

#[derive(Subcommand)]
enum AkbCommand {
    /// Add every tip of a document (or plain tip array); all or nothing.
    Import {
        file: PathBuf,
        #[arg(long)]
        akb: PathBuf,
    },
    /// Print the knowledge base as a document.
    Export {
        #[arg(long)]
        akb: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tip counts per domain.
    Stats {
        #[arg(long)]
        akb: PathBuf,
    },
    /// Make the knowledge base read-only.
    Freeze {
        #[arg(long)]
        akb: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Run(a) => run(a),
        Command::Bench(a) => bench(a),
        Command::Adapt(a) => adapt(a),
        Command::Serve(a) => serve(a),
        Command::Akb { cmd } => akb(cmd),
    }
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let env = LlmConfig::from_env();
    if std::env::var_os("AGENT_LLM_ENDPOINT").is_some() {
        cfg.llm.endpoint = env.endpoint;
    }
    if std::env::var_os("AGENT_LLM_MODEL").is_some() {
        cfg.llm.model = env.model;
    }
    cfg.llm.api_key = env.api_key.or(cfg.llm.api_key);
    if common.record_dir.is_some() {
        cfg.record_dir = common.record_dir.clone();
    }
    if common.akb.is_some() {
        cfg.akb_path = common.akb.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_store(path: Option<&Path>) -> Result<AkbStore> {
    Ok(match path {
        Some(p) => AkbStore::open(p).with_context(|| format!("opening {}", p.display()))?,
        None => AkbStore::in_memory(KnowledgeBase::seed()),
    })
}

fn backend(common: &Common, suite: &Suite, cfg: &RunConfig) -> Result<Backend> {
    let client: Arc<dyn LlmClient> = if let Some(path) = &common.replay {
        Arc::new(CassetteClient::replay(path)?)
    } else if common.live {
        let live: Arc<dyn LlmClient> = Arc::new(OpenAiClient::new(&cfg.llm)?);
        match &common.record {
            Some(path) => Arc::new(CassetteClient::record(path, live)?),
            None => live,
        }
    } else {
        let scripted = Backend::scripted_for(suite)?;
        let Some(path) = &common.record else { return Ok(scripted) };
        let Backend::Scripted(script) = scripted else { unreachable!("scripted_for always returns a script") };
        Arc::new(CassetteClient::record(path, Arc::new(ScriptedStub::new((*script).clone())))?)
    };
    Ok(Backend::Client { client, model_summarizer: common.model_summarizer })
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let suite = Suite::load(&a.common.suite)?;
    let cfg = RunConfig { ablation_mode: a.mode, ..run_config(&a.common)? };
    let task = suite.task(&a.task).with_context(|| format!("no task {:?} in {}", a.task, suite.name))?;
    let store = open_store(a.common.akb.as_deref())?;
    let backend = backend(&a.common, &suite, &cfg)?;
    let mut env = task.env();
    let out = run_task(&task.goal, &mut env, &store.snapshot(), &cfg, &backend.deps(&cfg))?;
    println!("run {}", out.run_id);
    println!("status {:?} after {} steps", out.status(), out.steps());
    println!("evaluation: {} ({})", if out.eval.success { "success" } else { "failure" }, out.eval.detail);
    if let Some(answer) = &out.answer {
        println!("answer: {answer}");
    }
    if let Some(v) = out.verdict.as_ref().filter(|v| v.fired) {
        println!("trigger: {} at steps {:?}", v.detail, v.evidence);
    }
    if let Some(dir) = &out.record_dir {
        println!("trajectory: {}", dir.display());
    }
    Ok(if out.eval.success { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let suite = Suite::load(&a.common.suite)?;
    let cfg = run_config(&a.common)?;
    let store = open_store(a.common.akb.as_deref())?;
    let modes = if a.mode.is_empty() { AblationMode::ALL.to_vec() } else { a.mode.clone() };
    let bench_cfg = BenchConfig { backend: backend(&a.common, &suite, &cfg)?, run: cfg, protocol: a.protocol, parallel: a.parallel };
    let reports: Vec<Report> = bench_modes(&suite, &store, &bench_cfg, &modes)?;
    for r in &reports {
        println!("{}", r.render_text());
    }
    if let Some(path) = &a.json {
        std::fs::write(path, serde_json::to_string_pretty(&reports)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn adapt(a: AdaptArgs) -> Result<ExitCode> {
    let suite = Suite::load(&a.common.suite)?;
    let cfg = RunConfig { ablation_mode: a.mode, ..run_config(&a.common)? };
    let store = open_store(a.common.akb.as_deref())?;
    let queue = FailureQueue::open(&a.queue)?;
    let mut expert: Box<dyn Expert> = match &a.tips {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Box::new(serde_json::from_str::<TipBook>(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Box::new(NoExpert),
    };
    let tasks: Vec<_> = suite.tasks.iter().filter(|t| a.task.is_empty() || a.task.contains(&t.id)).cloned().collect();
    if tasks.is_empty() {
        bail!("no matching tasks in {}", suite.name);
    }
    let backend = backend(&a.common, &suite, &cfg)?;
    let report = adaptation_loop(&tasks, &store, &queue, expert.as_mut(), &cfg, &backend)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn serve(a: ServeArgs) -> Result<ExitCode> {
    let cfg = run_config(&a.common)?;
    std::fs::create_dir_all(&a.data).with_context(|| format!("creating {}", a.data.display()))?;
    let store = Arc::new(open_store(a.common.akb.as_deref())?);
    let queue = Arc::new(FailureQueue::open(a.queue.clone().unwrap_or_else(|| a.data.join("queue.json")))?);
    let suite = Arc::new(Suite::load(&a.common.suite)?);
    let backend = backend(&a.common, &suite, &cfg)?;
    let mut state = ServiceState::new(store, queue, &a.data)
        .with_runner(suite, backend, cfg)
        .with_audit_log(a.data.join("audit.jsonl"));
    match a.token {
        Some(t) => state = state.with_token(t),
        None => log::warn!("no API token configured; every route is open"),
    }
    if a.protocol {
        state = state.with_protocol()?;
    }
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(kbagent_service::serve(state, addr))?;
    Ok(ExitCode::SUCCESS)
}

fn read_tips(path: &Path) -> Result<Vec<KnowledgeTip>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(doc) = serde_json::from_str::<AkbDocument>(&text) {
        return Ok(doc.tips);
    }
    serde_json::from_str(&text).with_context(|| format!("{} is neither an akb document nor a tip array", path.display()))
}

fn akb(cmd: AkbCommand) -> Result<ExitCode> {
    match cmd {
        AkbCommand::Import { file, akb } => {
            let store = AkbStore::open(&akb)?;
            let n = store.import(read_tips(&file)?)?;
            println!("imported {n} tips into {}", akb.display());
        }
        AkbCommand::Export { akb, out } => {
            let doc = AkbStore::open(&akb)?.export();
            let text = serde_json::to_string_pretty(&doc)? + "\n";
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        AkbCommand::Stats { akb } => {
            let kb = AkbStore::open(&akb)?.snapshot();
            for (domain, n) in kb.domain_counts() {
                println!("{domain}: {n}");
            }
            println!("total: {}", kb.len());
            println!("frozen: {}", kb.is_frozen());
        }
        AkbCommand::Freeze { akb } => {
            AkbStore::open(&akb)?.freeze()?;
            println!("{} is frozen", akb.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
