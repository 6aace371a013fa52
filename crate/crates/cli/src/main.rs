use std::fs;
use std::io::{self, Write};
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use icsfuzz_core::campaign::{replay_case, Campaign, CampaignConfig, CampaignError, CycleBudget};
use icsfuzz_core::clock::{SharedClock, SystemClock, VirtualClock};
use icsfuzz_core::feedback::classify_response;
use icsfuzz_core::harness::{Bug, Harness, Simulator, SimulatorConfig, StallSignal};
use icsfuzz_core::kb::{EntryKind, KnowledgeStore, Retriever, RuleEntry};
use icsfuzz_core::metrics::{compute_report, render_report, Ledger, MetricsError, ReportFormat};
use icsfuzz_core::protocol::{enumerate_combos, load_spec, ProtocolSpec};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ABORTED: u8 = 3;
const EXIT_INTERRUPTED: u8 = 130;

#[derive(Parser)]
#[command(name = "fuzz", version, about = "Multi-agent fuzzing for industrial control protocols")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a campaign from a config file.
    Run(RunArgs),
    /// Recompute the report from a ledger.
    Report(ReportArgs),
    /// Serve the Modbus simulator until interrupted.
    Sim(SimArgs),
    /// Inspect or extend a knowledge store.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Protocol spec utilities.
    #[command(subcommand)]
    Spec(SpecCommand),
    /// Re-send one ledger case and report what the target did.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cycles: Option<u32>,
    /// Cases per cycle (switches the budget to case counting).
    #[arg(long)]
    cases: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct ReportArgs {
    ledger: PathBuf,
    /// Spec for coverage. Defaults to the one named by config.toml next to the ledger.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 5020)]
    port: u16,
    /// Comma-separated: session_exhaustion, length_overflow_crash, io_halt_on_burst, or all.
    #[arg(long, value_delimiter = ',')]
    bugs: Vec<String>,
    #[arg(long)]
    session_limit: Option<usize>,
    /// Append the utilization trailer to replies.
    #[arg(long)]
    resource_channel: bool,
    /// Event log destination (JSON lines). Stdout when absent.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Stop after this many milliseconds instead of waiting for an interrupt.
    #[arg(long, hide = true)]
    duration_ms: Option<u64>,
}

#[derive(Subcommand)]
enum KbCommand {
    Search {
        store: PathBuf,
        query: String,
        #[arg(short = 'k', long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        threshold: Option<f64>,
    },
    Add {
        store: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "modbus_tcp")]
        protocol: String,
        /// command-format, field-constraint, vulnerability-note, anomaly-record or strategy-record
        #[arg(long)]
        kind: String,
        #[arg(long)]
        title: String,
        #[arg(long, default_value = "")]
        body: String,
        #[arg(long, value_delimiter = ',', required = true)]
        keywords: Vec<String>,
        #[arg(long, default_value = "")]
        source: String,
    },
}

#[derive(Subcommand)]
enum SpecCommand {
    /// Parse a spec and count its fields and value-class combos.
    Check { spec: PathBuf },
}

#[derive(Args)]
struct ReplayArgs {
    ledger: PathBuf,
    #[arg(long = "case")]
    case_id: String,
    /// Campaign config; defaults to config.toml next to the ledger.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Send to this host:port instead of a fresh simulator or the configured target.
    #[arg(long)]
    target: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => ReportFormat::Text,
            Format::Json => ReportFormat::Json,
        }
    }
}

/// Failure with a chosen exit status.
struct Exit(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        Exit(EXIT_FAILURE, e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Exit {
    Exit(EXIT_USAGE, e.into())
}

/// Set by the interrupt handler; commands that honor interrupts poll it.
fn interrupted() -> &'static Arc<AtomicBool> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    FLAG.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let f = flag.clone();
        if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
            tracing::warn!("no interrupt handler: {e}");
        }
        flag
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| level.into());
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(io::stderr).init();

    let res = match cli.command {
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::Sim(a) => sim(a),
        Command::Kb(c) => kb(c),
        Command::Spec(SpecCommand::Check { spec }) => spec_check(&spec),
        Command::Replay(a) => replay(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, e)) => {
            // several core errors already print their cause
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(a: RunArgs) -> Result<u8, Exit> {
    let mut cfg = CampaignConfig::load(&a.config).map_err(usage)?;
    if let Some(out) = a.out {
        cfg.output_dir = Some(out);
    }
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let Some(c) = a.cycles {
        cfg.cycles = c;
    }
    if let Some(n) = a.cases {
        cfg.budget = CycleBudget::Cases(n);
    }
    cfg.validate().map_err(usage)?;

    let campaign = match Campaign::prepare(cfg.clone()) {
        Ok(c) => c,
        Err(CampaignError::Config(e)) => return Err(usage(e)),
        Err(e) => return Err(e.into()),
    };
    let stop = campaign.stop_flag();
    let sigint = interrupted().clone();
    let done = Arc::new(AtomicBool::new(false));
    let watcher = {
        let done = done.clone();
        std::thread::spawn(move || {
            while !done.load(Ordering::SeqCst) {
                if sigint.load(Ordering::SeqCst) {
                    stop.store(true, Ordering::SeqCst);
                    break;
                }
                std::thread::sleep(Duration::from_millis(50));
            }
        })
    };
    let res = campaign.run();
    done.store(true, Ordering::SeqCst);
    let _ = watcher.join();

    let res = match res {
        Ok(r) => r,
        Err(CampaignError::Metrics(MetricsError::EmptyCampaign)) if interrupted().load(Ordering::SeqCst) => {
            eprintln!("interrupted before any case ran");
            return Ok(EXIT_INTERRUPTED);
        }
        Err(e) => return Err(e.into()),
    };
    print!("{}", render_report(&res.report, a.format.into()));
    io::stdout().flush()?;
    if let Some(out) = &res.output_dir {
        eprintln!("output written to {}", out.display());
    }
    Ok(match res.abort_reason.as_deref() {
        None => 0,
        Some("interrupted") => EXIT_INTERRUPTED,
        Some(reason) => {
            eprintln!("campaign aborted: {reason}");
            EXIT_ABORTED
        }
    })
}

/// config.toml written alongside a campaign's ledger, if any.
fn sibling_config(ledger: &Path) -> Option<PathBuf> {
    let p = ledger.parent().unwrap_or(Path::new(".")).join("config.toml");
    p.exists().then_some(p)
}

fn spec_for(cfg: &CampaignConfig) -> anyhow::Result<ProtocolSpec> {
    for p in &cfg.specs {
        let spec = load_spec(p)?;
        if spec.protocol_id == cfg.protocol_id {
            return Ok(spec);
        }
    }
    bail!("no listed spec defines `{}`", cfg.protocol_id)
}

fn report(a: ReportArgs) -> Result<u8, Exit> {
    let ledger = Ledger::read(&a.ledger).with_context(|| format!("reading {}", a.ledger.display()))?;
    let spec = match (&a.spec, sibling_config(&a.ledger)) {
        (Some(p), _) => Some(load_spec(p)?),
        (None, Some(c)) => Some(spec_for(&CampaignConfig::load(&c).map_err(usage)?)?),
        (None, None) => None,
    };
    let report = compute_report(&ledger, spec.as_ref())?;
    print!("{}", render_report(&report, a.format.into()));
    Ok(0)
}

fn socket_addr(host: &str, port: u16) -> anyhow::Result<SocketAddr> {
    (host, port).to_socket_addrs()?.next().ok_or_else(|| anyhow!("`{host}` did not resolve"))
}

fn sim(a: SimArgs) -> Result<u8, Exit> {
    let mut bugs = Vec::new();
    for b in &a.bugs {
        if b == "all" {
            bugs.extend(Bug::ALL);
        } else {
            bugs.push(b.parse::<Bug>().map_err(|e| usage(anyhow!(e)))?);
        }
    }
    let mut config = SimulatorConfig::with_bugs(&bugs);
    if let Some(n) = a.session_limit {
        if n == 0 {
            return Err(usage(anyhow!("--session-limit must be positive")));
        }
        config.session_limit = n;
    }
    config.resource_channel = a.resource_channel;

    let mut out: Box<dyn Write> = match &a.events {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout()),
    };
    let stop = interrupted().clone();
    let clock: SharedClock = SystemClock::shared();
    let sim = Simulator::start(config, socket_addr(&a.host, a.port)?, clock, StallSignal::new())?;
    let names: Vec<&str> = bugs.iter().map(|b| b.as_str()).collect();
    eprintln!("simulator listening on {} (bugs: {})", sim.addr(), if names.is_empty() { "none".into() } else { names.join(",") });

    let started = std::time::Instant::now();
    let mut n = 0usize;
    loop {
        let finished = stop.load(Ordering::SeqCst)
            || a.duration_ms.is_some_and(|ms| started.elapsed() >= Duration::from_millis(ms));
        for ev in sim.take_events() {
            serde_json::to_writer(&mut out, &ev)?;
            out.write_all(b"\n")?;
            n += 1;
        }
        out.flush()?;
        if finished {
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    sim.stop();
    eprintln!("{n} events");
    Ok(if stop.load(Ordering::SeqCst) { EXIT_INTERRUPTED } else { 0 })
}

fn kb(c: KbCommand) -> Result<u8, Exit> {
    match c {
        KbCommand::Search { store, query, top, threshold } => {
            let mut kb = KnowledgeStore::load(&store)?;
            if let Some(t) = threshold {
                kb.threshold = t;
            }
            let hits = kb.retrieve(&query, top);
            if hits.is_empty() {
                eprintln!("no entries above threshold {}", kb.threshold);
            }
            for h in hits {
                println!("{:.4}  {}  {}", h.score, h.entry.id, h.entry.title);
            }
            Ok(0)
        }
        KbCommand::Add { store, id, protocol, kind, title, body, keywords, source } => {
            let kind: EntryKind = serde_json::from_value(serde_json::Value::String(kind.clone()))
                .map_err(|_| usage(anyhow!("unknown entry kind `{kind}`")))?;
            let mut kb = if store.exists() {
                KnowledgeStore::load(&store)?
            } else {
                let mut kb = KnowledgeStore::in_memory();
                kb.set_path(Some(store.clone()));
                kb
            };
            let keywords = keywords.into_iter().map(|k| k.trim().to_string()).filter(|k| !k.is_empty()).collect();
            kb.append(RuleEntry { id: id.clone(), protocol_id: protocol, kind, title, body, keywords, source })?;
            println!("added {id} ({} entries)", kb.len());
            Ok(0)
        }
    }
}

fn spec_check(path: &Path) -> Result<u8, Exit> {
    let spec = load_spec(path)?;
    println!("OK, {} fields, {} combos", spec.fields.len(), enumerate_combos(&spec).len());
    Ok(0)
}

fn replay(a: ReplayArgs) -> Result<u8, Exit> {
    let ledger = Ledger::read(&a.ledger).with_context(|| format!("reading {}", a.ledger.display()))?;
    let cfg_path = a.config.clone().or_else(|| sibling_config(&a.ledger)).ok_or_else(|| {
        usage(anyhow!("no config.toml next to {}; pass --config", a.ledger.display()))
    })?;
    let cfg = CampaignConfig::load(&cfg_path).map_err(usage)?;
    let spec = spec_for(&cfg)?;
    if !ledger.cases().any(|(id, _)| id == a.case_id) {
        return Err(usage(anyhow!("case `{}` is not in the ledger", a.case_id)));
    }

    let clock: SharedClock = VirtualClock::shared();
    let stall = StallSignal::new();
    let mut target = cfg.target.clone();
    let mut sim = None;
    if let Some(t) = &a.target {
        let addr: SocketAddr = t.to_socket_addrs()?.next().ok_or_else(|| anyhow!("`{t}` did not resolve"))?;
        target.host = addr.ip().to_string();
        target.port = addr.port();
    } else if cfg.simulator.enabled {
        let s = Simulator::start(cfg.simulator.config.clone(), socket_addr(&target.host, 0)?, clock.clone(), stall.clone())?;
        target.port = s.port();
        target.resource_channel |= cfg.simulator.config.resource_channel;
        sim = Some(s);
    }
    let harness = Harness::new(target, spec.clone(), clock)?.with_stall_signal(stall);
    let obs = replay_case(&ledger, &a.case_id, &harness).expect("case presence checked");
    let c = classify_response(&obs, &spec, cfg.feedback.delay_threshold_ms);
    println!("{}", serde_json::json!({ "observation": obs, "class": c.class, "reason": c.reason }));
    if let Some(s) = sim {
        s.stop();
    }
    Ok(0)
}
