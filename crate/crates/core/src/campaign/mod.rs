//! Campaign orchestration. One loop drives every agent in a fixed order over
//! the bus, and the same loop acts as the monitor: it collects heartbeats,
//! detects failed agents and moves their batch tasks to survivors.
//!
//! With the virtual clock and the in-process bus a run is a pure function of
//! the config and master seed.

mod config;

use std::fs;
use std::io::{self, Write as _};
use std::net::{IpAddr, SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use thiserror::Error;

use crate::bus::{
    AgentStatus, BusError, BusMessage, ControlEvent, Heartbeater, InProcBus, Registry, RegistryError, Role, Subscription,
    Task, TcpBroker, TcpBusClient, Topic, Transport,
};
use crate::capture::{ingest_traffic, CaptureError, CaptureSource};
use crate::clock::{SharedClock, SystemClock, VirtualClock};
use crate::feedback::{FeedbackAgent, Liveness, Observation};
use crate::harness::{Harness, HarnessAgent, HarnessError, SimEvent, Simulator, SimulatorError, StallSignal};
use crate::kb::{KbError, KnowledgeStore};
use crate::metrics::{compute_report, render_report, Ledger, LedgerRecord, LedgerWriter, MetricReport, MetricsError, ReportFormat};
use crate::mutation::{Backend, MutationAgent, MutationStrategy, RemoteBackend, TestCase};
use crate::protocol::{load_spec, ProtocolSpec, SpecError};
use crate::rng;
use crate::seed::{QuarantineRecord, Seed, SeedAgent, SeedOutcome};

pub use config::{
    BackendConfig, BackendKind, BusConfig, BusTransport, CampaignConfig, ClockMode, ConfigError, CycleBudget, KillConfig,
    SimulatorSection, StrategyConfig,
};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("no seeds for `{0}`: captures yielded nothing and augmentation is off")]
    NoSeeds(String),
}

/// What the monitor did, for resilience checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoordinationTrace {
    /// Every control announcement with its clock time.
    pub control: Vec<(u64, ControlEvent)>,
    /// (task, agent) in the order tasks were finished.
    pub processed: Vec<(String, String)>,
    pub killed_at: Option<u64>,
}

#[derive(Debug)]
pub struct CampaignResult {
    pub report: MetricReport,
    pub ledger: Ledger,
    pub completed: bool,
    /// Why the campaign stopped early, if it did.
    pub abort_reason: Option<String>,
    pub trace: CoordinationTrace,
    pub sim_events: Vec<SimEvent>,
    pub quarantine: Vec<QuarantineRecord>,
    pub output_dir: Option<PathBuf>,
}

impl CampaignResult {
    /// Case bytes as hex, in execution order.
    pub fn case_hex(&self) -> Vec<String> {
        self.ledger.cases().map(|(_, b)| hex::encode(b)).collect()
    }
}

pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignResult, CampaignError> {
    Campaign::prepare(cfg.clone())?.run()
}

struct Slot {
    agent: MutationAgent,
    seeds: Subscription,
    strategy: Subscription,
    heartbeat: Heartbeater,
    killed: bool,
}

pub struct Campaign {
    cfg: CampaignConfig,
    spec: ProtocolSpec,
    clock: SharedClock,
    bus: Arc<dyn Transport>,
    _broker: Option<TcpBroker>,
    wait: Duration,
    store: KnowledgeStore,
    seed_agent: SeedAgent,
    slots: Vec<Slot>,
    feedback: FeedbackAgent,
    feedback_cases: Subscription,
    feedback_responses: Subscription,
    harness: HarnessAgent,
    harness_cases: Subscription,
    heartbeats: Vec<Heartbeater>,
    monitor: Subscription,
    registry: Registry,
    sim: Option<Simulator>,
    ledger: Ledger,
    writer: Option<LedgerWriter>,
    stop: Arc<AtomicBool>,
    trace: CoordinationTrace,
    executed: u64,
    task_seq: u64,
    last_liveness: Liveness,
}

fn expect(sub: &Subscription, n: usize, wait: Duration) -> Result<Vec<BusMessage>, BusError> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        match sub.recv_timeout(wait) {
            Some(m) => out.push(m),
            None => {
                return Err(BusError::Unavailable(format!(
                    "{} expected {n} message(s) on {}, got {}",
                    sub.agent_id,
                    sub.topic,
                    out.len()
                )))
            }
        }
    }
    Ok(out)
}

fn resolve(host: &str, port: u16) -> Result<SocketAddr, ConfigError> {
    (host, port)
        .to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| ConfigError::Invalid(format!("cannot resolve {host}:{port}")))
}

impl Campaign {
    /// Loads specs and the store, starts the bus (and simulator) and builds
    /// the agents. Nothing is executed yet.
    pub fn prepare(cfg: CampaignConfig) -> Result<Campaign, CampaignError> {
        cfg.validate()?;
        let specs = cfg.specs.iter().map(load_spec).collect::<Result<Vec<_>, _>>()?;
        let spec = specs
            .iter()
            .find(|s| s.protocol_id == cfg.protocol_id)
            .cloned()
            .ok_or_else(|| ConfigError::Invalid(format!("no listed spec defines `{}`", cfg.protocol_id)))?;
        let clock: SharedClock = match cfg.clock {
            ClockMode::Virtual => VirtualClock::shared(),
            ClockMode::System => SystemClock::shared(),
        };

        let mut store = match &cfg.knowledge_base {
            Some(p) => KnowledgeStore::load(p)?,
            None => KnowledgeStore::in_memory(),
        };
        let mut writer = None;
        if let Some(out) = &cfg.output_dir {
            fs::create_dir_all(out)?;
            // anomalies go to a copy; the source store is left untouched
            let kb_copy = out.join("kb.jsonl");
            match &cfg.knowledge_base {
                Some(p) => {
                    fs::copy(p, &kb_copy)?;
                }
                None => {
                    fs::write(&kb_copy, "")?;
                }
            }
            store.set_path(Some(kb_copy));
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            writer = Some(LedgerWriter::create(out.join("ledger.jsonl"))?);
        } else {
            store.set_path(None);
        }

        let inproc = InProcBus::new(clock.clone(), cfg.bus.capacity);
        let (bus, broker, wait): (Arc<dyn Transport>, _, _) = match cfg.bus.transport {
            BusTransport::Inproc => (Arc::new(inproc), None, Duration::from_millis(200)),
            BusTransport::Tcp => {
                let host: IpAddr = cfg
                    .bus
                    .host
                    .parse()
                    .map_err(|_| ConfigError::Invalid(format!("bus host `{}` is not an IP address", cfg.bus.host)))?;
                let broker = TcpBroker::bind(host, cfg.bus.ports, inproc)?;
                let client = TcpBusClient::new(host, broker.ports());
                (Arc::new(client), Some(broker), Duration::from_secs(5))
            }
        };

        let mut target = cfg.target.clone();
        let stall = StallSignal::new();
        let sim = if cfg.simulator.enabled {
            let addr = resolve(&target.host, target.port)?;
            let sim = Simulator::start(cfg.simulator.config.clone(), addr, clock.clone(), stall.clone())?;
            target.port = sim.port();
            target.resource_channel = target.resource_channel || cfg.simulator.config.resource_channel;
            Some(sim)
        } else {
            None
        };
        let harness = HarnessAgent::new(Harness::new(target, spec.clone(), clock.clone())?.with_stall_signal(stall));

        let mut strategy = MutationStrategy::for_spec(&spec, cfg.strategy.rho0, cfg.strategy.alpha, cfg.strategy.beta);
        strategy.direction_weights = cfg.strategy.direction_weights;
        let backend = match cfg.backend.kind {
            BackendKind::Deterministic => Backend::Deterministic,
            BackendKind::RandomBytes => {
                Backend::RandomBytes { min_len: cfg.backend.random_min_len, max_len: cfg.backend.random_max_len }
            }
            BackendKind::Remote => {
                Backend::Remote(RemoteBackend { config: cfg.backend.remote.clone(), store: Arc::new(store.clone()) })
            }
        };

        let now = clock.now_ms();
        let interval = cfg.bus.heartbeat_interval_ms;
        let mut registry = Registry::new(interval, cfg.bus.failure_timeout_ms);
        let mut slots = Vec::new();
        for i in 0..cfg.mutation_agents {
            let mut agent =
                MutationAgent::new(i, spec.clone(), strategy.clone(), backend.clone(), rng::stream(cfg.master_seed, "mutation", i));
            agent.config = cfg.engine.clone();
            registry.register(&agent.agent_id, Role::Mutation, now);
            slots.push(Slot {
                seeds: bus.subscribe(Topic::Seed, &agent.agent_id)?,
                strategy: bus.subscribe(Topic::Strategy, &agent.agent_id)?,
                heartbeat: Heartbeater::new(&agent.agent_id, interval, now),
                agent,
                killed: false,
            });
        }
        let seed_agent = SeedAgent::new("seed-0", specs);
        let feedback = FeedbackAgent::new(spec.clone(), strategy, cfg.feedback.clone());
        let mut heartbeats = Vec::new();
        for (id, role) in [("seed-0", Role::Seed), (feedback.agent_id.as_str(), Role::Feedback), ("harness-0", Role::Harness)] {
            registry.register(id, role, now);
            heartbeats.push(Heartbeater::new(id, interval, now));
        }

        Ok(Campaign {
            feedback_cases: bus.subscribe(Topic::TestCase, &feedback.agent_id)?,
            feedback_responses: bus.subscribe(Topic::Response, &feedback.agent_id)?,
            harness_cases: bus.subscribe(Topic::TestCase, &harness.agent_id)?,
            monitor: bus.subscribe(Topic::Heartbeat, "monitor")?,
            cfg,
            spec,
            clock,
            bus,
            _broker: broker,
            wait,
            store,
            seed_agent,
            slots,
            feedback,
            harness,
            heartbeats,
            registry,
            sim,
            ledger: Ledger::new(),
            writer,
            stop: Arc::new(AtomicBool::new(false)),
            trace: CoordinationTrace::default(),
            executed: 0,
            task_seq: 0,
            last_liveness: Liveness::Alive,
        })
    }

    /// Setting this flag ends the campaign after the current case.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn record(&mut self, r: LedgerRecord) -> Result<(), CampaignError> {
        if let Some(w) = self.writer.as_mut() {
            w.append(&r)?;
        }
        self.ledger.push(r);
        Ok(())
    }

    pub fn run(mut self) -> Result<CampaignResult, CampaignError> {
        let header = LedgerRecord::Campaign {
            name: self.cfg.name.clone(),
            protocol_id: self.spec.protocol_id.clone(),
            backend: self.slots[0].agent.backend.name().to_string(),
            master_seed: self.cfg.master_seed,
        };
        self.record(header)?;
        self.ingest_seeds()?;
        let mut abort_reason = None;
        for cycle in 1..=self.cfg.cycles {
            let at_ms = self.clock.now_ms();
            self.record(LedgerRecord::Cycle { index: cycle, at_ms })?;
            if let Err(reason) = self.run_cycle(cycle)? {
                abort_reason = Some(reason);
                break;
            }
            if self.stopped() {
                abort_reason = Some("interrupted".into());
                break;
            }
            if let Some(w) = self.writer.as_mut() {
                w.flush()?;
            }
        }
        let completed = abort_reason.is_none();
        self.record(LedgerRecord::End { completed })?;
        self.finish(completed, abort_reason)
    }

    fn ingest_seeds(&mut self) -> Result<(), CampaignError> {
        let ports = [self.spec.default_port];
        let mut published: Vec<Seed> = Vec::new();
        for path in self.cfg.captures.clone() {
            for cap in ingest_traffic(&CaptureSource::from_path(path), &ports)? {
                if let SeedOutcome::Published(s) = self.seed_agent.process(&cap, &self.store) {
                    published.push(s);
                }
            }
        }
        let mut rng = rng::stream(self.cfg.master_seed, "seed", 0);
        if self.cfg.augment {
            published.extend(self.seed_agent.augment(&self.spec.protocol_id, &self.store, &mut rng));
        }
        if self.cfg.synthetic_seeds > 0 {
            let n = self.cfg.synthetic_seeds;
            published.extend(self.seed_agent.synthesize(&self.spec.protocol_id, n, &self.store, &mut rng));
        }
        for s in &published {
            self.seed_agent.emit(s, self.bus.as_ref())?;
            self.record(LedgerRecord::Seed {
                seed_id: s.seed_id.clone(),
                protocol_id: s.protocol_id.clone(),
                fields: s.fields.clone(),
                provenance: s.provenance.clone(),
            })?;
        }
        for slot in &mut self.slots {
            for m in expect(&slot.seeds, published.len(), self.wait)? {
                if let Err(e) = slot.agent.add_seed(&m.data) {
                    tracing::warn!(agent = %slot.agent.agent_id, error = %e, "seed rejected");
                }
            }
        }
        if self.slots[0].agent.corpus.is_empty() {
            return Err(CampaignError::NoSeeds(self.spec.protocol_id.clone()));
        }
        Ok(())
    }

    fn announce(&mut self, events: Vec<ControlEvent>) -> Result<(), CampaignError> {
        let now = self.clock.now_ms();
        for ev in events {
            if let Err(e) = self.bus.publish(Topic::Control, ev.name(), ev.data(), "monitor") {
                tracing::warn!(error = %e, "control announcement failed");
            }
            self.record(LedgerRecord::Control { event: ev.name().to_string(), data: ev.data() })?;
            self.trace.control.push((now, ev));
        }
        Ok(())
    }

    /// Heartbeats in, failure detection, redistribution out.
    fn monitor_tick(&mut self) -> Result<(), CampaignError> {
        let now = self.clock.now_ms();
        let mut sent = 0;
        for hb in self.heartbeats.iter_mut().chain(self.slots.iter_mut().map(|s| &mut s.heartbeat)) {
            sent += hb.poll(now, self.bus.as_ref());
        }
        let mut events = Vec::new();
        for m in expect(&self.monitor, sent, self.wait)? {
            if let Some(id) = m.data["agent_id"].as_str() {
                match self.registry.heartbeat(id, now) {
                    Ok(ev) => events.extend(ev),
                    Err(e) => tracing::warn!(error = %e, "heartbeat from unknown agent"),
                }
            }
        }
        for failed in self.registry.detect_failures(now) {
            tracing::warn!(agent = %failed, "agent missed its failure timeout");
            match self.registry.redistribute(&failed, now) {
                Ok((_, ev)) => events.extend(ev),
                Err(e @ RegistryError::NoCandidateAgents { .. }) => {
                    events.push(ControlEvent::AgentFailed { agent_id: failed.clone(), at: now });
                    tracing::error!(error = %e, "tasks parked");
                }
                Err(e) => tracing::warn!(error = %e, "redistribution failed"),
            }
        }
        self.announce(events)
    }

    fn idle_mutation_agents(&self) -> usize {
        self.registry
            .alive(Role::Mutation)
            .iter()
            .filter(|a| a.status == AgentStatus::Alive && a.assigned_tasks.is_empty())
            .count()
    }

    /// `Ok(Err(reason))` aborts the campaign with a partial ledger.
    fn run_cycle(&mut self, cycle: u32) -> Result<Result<(), String>, CampaignError> {
        let start = self.clock.now_ms();
        let mut remaining = match self.cfg.budget {
            CycleBudget::Cases(n) => n,
            CycleBudget::DurationMs(_) => u64::MAX,
        };
        loop {
            if self.stopped() {
                return Ok(Ok(()));
            }
            self.monitor_tick()?;
            if let CycleBudget::DurationMs(d) = self.cfg.budget {
                if self.clock.now_ms().saturating_sub(start) >= d {
                    remaining = 0;
                }
            }
            while remaining > 0 && self.idle_mutation_agents() > 0 {
                let n = remaining.min(self.cfg.batch_size as u64);
                self.task_seq += 1;
                let task = Task {
                    id: format!("batch-{:06}", self.task_seq),
                    role: Role::Mutation,
                    payload: json!({ "seed_index": self.task_seq - 1, "cases": n, "cycle": cycle }),
                };
                let ev = self.registry.assign(task, self.clock.now_ms());
                self.announce(vec![ev])?;
                if remaining != u64::MAX {
                    remaining -= n;
                }
            }
            let pending = self.registry.all_task_ids();
            if remaining == 0 && pending.is_empty() {
                return Ok(Ok(()));
            }
            if self.registry.alive(Role::Mutation).is_empty() {
                return Ok(Err(format!("no mutation agent left; {} task(s) parked", pending.len())));
            }
            let mut progressed = false;
            for i in 0..self.slots.len() {
                if self.slots[i].killed {
                    // a dead agent reads nothing
                    self.slots[i].seeds.drain();
                    self.slots[i].strategy.drain();
                    continue;
                }
                let id = self.slots[i].agent.agent_id.clone();
                let task = self.registry.agent(&id).and_then(|a| a.assigned_tasks.first().cloned());
                if let Some(task) = task {
                    self.run_task(i, &task)?;
                    progressed = true;
                    if self.stopped() {
                        return Ok(Ok(()));
                    }
                }
            }
            if !progressed {
                // waiting for the monitor to notice a silent agent
                self.clock.sleep_ms(self.cfg.bus.heartbeat_interval_ms);
            }
        }
    }

    fn run_task(&mut self, slot: usize, task: &Task) -> Result<(), CampaignError> {
        let seed_index = task.payload["seed_index"].as_u64().unwrap_or(0) as usize;
        let n = task.payload["cases"].as_u64().unwrap_or(0) as usize;
        let cases = self.slots[slot].agent.run_batch(seed_index, n);
        for c in &cases {
            self.slots[slot].agent.publish(c, self.bus.as_ref())?;
        }
        let delivered = expect(&self.harness_cases, cases.len(), self.wait)?;
        for (case, msg) in cases.iter().zip(delivered) {
            self.execute_case(case, &msg)?;
            if self.stopped() {
                break;
            }
        }
        if self.registry.complete(&task.id) {
            self.trace.processed.push((task.id.clone(), self.slots[slot].agent.agent_id.clone()));
        }
        Ok(())
    }

    fn execute_case(&mut self, case: &TestCase, msg: &BusMessage) -> Result<(), CampaignError> {
        let note = expect(&self.feedback_cases, 1, self.wait)?;
        self.feedback.note_case(&note[0].data);
        self.record(LedgerRecord::Case {
            case_id: case.case_id.clone(),
            seed_id: case.seed_id.clone(),
            agent: msg.sender.clone(),
            bytes: case.bytes.clone(),
            mutations: case.mutations.clone(),
            fallback: case.fallback,
        })?;
        let bytes = msg.data["hex"].as_str().and_then(|h| hex::decode(h).ok()).unwrap_or_default();
        let case_id = msg.data["case_id"].as_str().unwrap_or_default().to_string();
        self.harness.run_case(&case_id, &bytes, self.bus.as_ref())?;

        let resp = expect(&self.feedback_responses, 1, self.wait)?;
        let obs: Observation = serde_json::from_value(resp[0].data.clone())
            .map_err(|e| BusError::SchemaViolation { topic: Topic::Response, reason: e.to_string() })?;
        let a = self.feedback.observe(&obs, &mut self.store, self.bus.as_ref())?;
        self.record(LedgerRecord::Observation {
            observation: obs.clone(),
            class: a.class.class,
            reason: a.class.reason,
            score: a.score.s.to_f64(),
        })?;
        if a.strategy_changed {
            let s = &self.feedback.strategy;
            let rec = LedgerRecord::Strategy { after_case: case_id.clone(), rho: s.rho, feedback_score: s.feedback_score };
            self.record(rec)?;
            let wait = self.wait;
            for slot in self.slots.iter_mut().filter(|s| !s.killed) {
                for m in expect(&slot.strategy, 1, wait)? {
                    slot.agent.queue_strategy(m.data);
                }
            }
        }
        if obs.liveness_after == Liveness::Down && self.last_liveness != Liveness::Down {
            let restart = self.sim.is_some() && self.cfg.simulator.restart_on_crash;
            let detail = format!("target down after {case_id}: {:?}", obs.outcome);
            self.record(LedgerRecord::Crash { opened_by: case_id.clone(), detail, restarted: restart })?;
        }
        self.last_liveness = obs.liveness_after;
        if obs.liveness_after == Liveness::Down && self.cfg.simulator.restart_on_crash {
            if let Some(sim) = &self.sim {
                sim.restart()?;
            }
        }
        self.executed += 1;
        self.maybe_kill();
        self.monitor_tick()
    }

    fn maybe_kill(&mut self) {
        let Some(k) = self.cfg.kill.clone() else { return };
        if self.trace.killed_at.is_some() || self.executed < k.after_cases {
            return;
        }
        if let Some(slot) = self.slots.iter_mut().find(|s| s.agent.agent_id == k.agent) {
            slot.killed = true;
            slot.heartbeat.set_paused(true);
            self.trace.killed_at = Some(self.clock.now_ms());
            tracing::warn!(agent = %k.agent, "agent killed by fault injection");
        }
    }

    fn finish(mut self, completed: bool, abort_reason: Option<String>) -> Result<CampaignResult, CampaignError> {
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        let report = compute_report(&self.ledger, Some(&self.spec))?;
        let sim_events = self.sim.as_ref().map(Simulator::take_events).unwrap_or_default();
        let quarantine = std::mem::take(&mut self.seed_agent.quarantine);
        if let Some(out) = &self.cfg.output_dir {
            fs::write(out.join("report.txt"), render_report(&report, ReportFormat::Text))?;
            fs::write(out.join("report.json"), render_report(&report, ReportFormat::Json))?;
            write_jsonl(out.join("quarantine.jsonl"), &quarantine)?;
            write_jsonl(out.join("simulator_events.jsonl"), &sim_events)?;
        }
        if let Some(sim) = self.sim.take() {
            sim.stop();
        }
        Ok(CampaignResult {
            report,
            ledger: self.ledger,
            completed,
            abort_reason,
            trace: self.trace,
            sim_events,
            quarantine,
            output_dir: self.cfg.output_dir.clone(),
        })
    }
}

fn write_jsonl<T: serde::Serialize>(path: PathBuf, items: &[T]) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

/// Re-sends one ledger case to a target and probes it afterwards.
pub fn replay_case(ledger: &Ledger, case_id: &str, harness: &Harness) -> Option<Observation> {
    let (_, bytes) = ledger.cases().find(|(id, _)| *id == case_id)?;
    Some(harness.execute(case_id, bytes))
}
