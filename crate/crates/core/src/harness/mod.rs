//! Target harness: delivers test cases over TCP, times the replies and probes
//! liveness after every case.
//!
//! Each exchange uses its own connection: connect, write the case, half-close,
//! then read until the target closes. Response times are measured on the shared
//! clock, so under the virtual clock they are the latency the target charged.

pub mod simulator;

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use socket2::SockRef;
use thiserror::Error;

use crate::bus::{BusError, Transport};
use crate::clock::SharedClock;
use crate::feedback::{Liveness, Observation, Outcome};
use crate::protocol::{decode_frame, validate_frame, ProtocolSpec};

pub use simulator::{Bug, EventKind, SimEvent, Simulator, SimulatorConfig, SimulatorError, RESOURCE_TAG};

/// Raised by an in-process target when it stops answering a connection.
/// The harness reports a timeout as soon as the epoch moves instead of
/// waiting out the wall-clock deadline.
#[derive(Debug, Clone, Default)]
pub struct StallSignal(Arc<AtomicU64>);

impl StallSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raise(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }

    pub fn epoch(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetEndpoint {
    pub host: String,
    pub port: u16,
    pub protocol_id: String,
    pub connect_timeout_ms: u64,
    pub response_timeout_ms: u64,
    /// Extra connection attempts after a refusal.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Probe replies slower than this mark the target degraded.
    pub degraded_threshold_ms: u64,
    /// Strip and report the `FF 'R' pct` utilization trailer.
    pub resource_channel: bool,
}

impl Default for TargetEndpoint {
    fn default() -> Self {
        TargetEndpoint {
            host: "127.0.0.1".into(),
            port: 502,
            protocol_id: "modbus_tcp".into(),
            connect_timeout_ms: 1000,
            response_timeout_ms: 2000,
            max_retries: 2,
            backoff_base_ms: 50,
            degraded_threshold_ms: 200,
            resource_channel: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot resolve target {0}")]
    Resolve(String),
    #[error("spec `{0}` defines no liveness probes")]
    NoProbes(String),
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub outcome: Outcome,
    pub response_time_ms: u64,
    pub resource_signal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub liveness: Liveness,
    /// Slowest probe reply.
    pub latency_ms: u64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Harness {
    endpoint: TargetEndpoint,
    addr: SocketAddr,
    clock: SharedClock,
    stall: Option<StallSignal>,
    spec: ProtocolSpec,
}

const POLL: Duration = Duration::from_millis(10);

impl Harness {
    pub fn new(endpoint: TargetEndpoint, spec: ProtocolSpec, clock: SharedClock) -> Result<Harness, HarnessError> {
        let target = format!("{}:{}", endpoint.host, endpoint.port);
        let addr = target
            .to_socket_addrs()
            .ok()
            .and_then(|mut a| a.next())
            .ok_or(HarnessError::Resolve(target))?;
        if spec.probes.is_empty() {
            return Err(HarnessError::NoProbes(spec.protocol_id.clone()));
        }
        Ok(Harness { endpoint, addr, clock, stall: None, spec })
    }

    pub fn with_stall_signal(mut self, stall: StallSignal) -> Self {
        self.stall = Some(stall);
        self
    }

    pub fn endpoint(&self) -> &TargetEndpoint {
        &self.endpoint
    }

    fn connect(&self) -> io::Result<TcpStream> {
        let s = TcpStream::connect_timeout(&self.addr, Duration::from_millis(self.endpoint.connect_timeout_ms))?;
        s.set_nodelay(true)?;
        // abortive close: no TIME_WAIT left behind per case
        SockRef::from(&s).set_linger(Some(Duration::ZERO))?;
        Ok(s)
    }

    /// Sends one case, retrying refused connections with exponential backoff.
    pub fn inject(&self, bytes: &[u8]) -> Exchange {
        let start = self.clock.now_ms();
        let mut attempt = 0u32;
        let stream = loop {
            match self.connect() {
                Ok(s) => break s,
                Err(e) => {
                    let transient = matches!(e.kind(), io::ErrorKind::ConnectionRefused | io::ErrorKind::TimedOut);
                    if !transient || attempt >= self.endpoint.max_retries {
                        let outcome = match e.kind() {
                            io::ErrorKind::TimedOut => Outcome::Timeout,
                            _ => Outcome::ConnectionRefused,
                        };
                        return self.finish(start, outcome, None);
                    }
                    self.clock.sleep_ms(self.endpoint.backoff_base_ms << attempt);
                    attempt += 1;
                }
            }
        };
        self.exchange(stream, bytes, start)
    }

    fn exchange(&self, mut stream: TcpStream, bytes: &[u8], start: u64) -> Exchange {
        let epoch = self.stall.as_ref().map(StallSignal::epoch);
        if stream.write_all(bytes).is_err() {
            return self.finish(start, Outcome::ConnectionReset, None);
        }
        let _ = stream.shutdown(Shutdown::Write);
        let _ = stream.set_read_timeout(Some(POLL));
        let deadline = Instant::now() + Duration::from_millis(self.endpoint.response_timeout_ms);
        let mut buf = Vec::new();
        let mut chunk = [0u8; 1024];
        loop {
            match stream.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    let stalled = epoch.is_some_and(|ep| self.stall.as_ref().is_some_and(|s| s.epoch() != ep));
                    if stalled || Instant::now() >= deadline {
                        return self.timed_out(start);
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => {
                    if buf.is_empty() {
                        return self.finish(start, Outcome::ConnectionReset, None);
                    }
                    break;
                }
            }
        }
        if buf.is_empty() {
            return self.finish(start, Outcome::ConnectionReset, None);
        }
        let mut signal = None;
        if self.endpoint.resource_channel && buf.len() >= 3 && buf[buf.len() - 3..buf.len() - 1] == RESOURCE_TAG {
            signal = Some(f64::from(buf[buf.len() - 1]) / 100.0);
            buf.truncate(buf.len() - 3);
        }
        self.finish(start, Outcome::Reply { bytes: buf }, signal)
    }

    fn timed_out(&self, start: u64) -> Exchange {
        let limit = self.endpoint.response_timeout_ms;
        if self.clock.is_virtual() {
            let spent = self.clock.now_ms().saturating_sub(start);
            self.clock.sleep_ms(limit.saturating_sub(spent));
        }
        Exchange { outcome: Outcome::Timeout, response_time_ms: limit, resource_signal: None }
    }

    fn finish(&self, start: u64, outcome: Outcome, resource_signal: Option<f64>) -> Exchange {
        Exchange { outcome, response_time_ms: self.clock.now_ms().saturating_sub(start), resource_signal }
    }

    /// Sends every canonical probe. Any probe without a reply means down; a
    /// slow or malformed reply means degraded.
    pub fn probe_liveness(&self) -> ProbeReport {
        let reply_spec = self.spec.reply.as_deref().unwrap_or(&self.spec);
        let mut report = ProbeReport { liveness: Liveness::Alive, latency_ms: 0, detail: "all probes answered".into() };
        for probe in &self.spec.probes {
            let start = self.clock.now_ms();
            let ex = match self.connect() {
                Ok(s) => self.exchange(s, probe, start),
                Err(_) => self.finish(start, Outcome::ConnectionRefused, None),
            };
            report.latency_ms = report.latency_ms.max(ex.response_time_ms);
            let Outcome::Reply { bytes } = &ex.outcome else {
                return ProbeReport {
                    liveness: Liveness::Down,
                    latency_ms: report.latency_ms,
                    detail: format!("probe {} got {:?}", hex::encode(probe), ex.outcome),
                };
            };
            let well_formed = decode_frame(bytes, reply_spec).is_ok_and(|f| validate_frame(&f, reply_spec).valid);
            if !well_formed {
                report.liveness = Liveness::Degraded;
                report.detail = format!("malformed probe reply {}", hex::encode(bytes));
            } else if ex.response_time_ms > self.endpoint.degraded_threshold_ms && report.liveness == Liveness::Alive {
                report.liveness = Liveness::Degraded;
                report.detail = format!("probe reply took {} ms", ex.response_time_ms);
            }
        }
        report
    }

    /// Inject, probe, and build the observation.
    pub fn execute(&self, case_id: &str, bytes: &[u8]) -> Observation {
        let ex = self.inject(bytes);
        let probe = self.probe_liveness();
        Observation {
            case_id: case_id.to_string(),
            outcome: ex.outcome,
            response_time_ms: ex.response_time_ms,
            liveness_after: probe.liveness,
            resource_signal: ex.resource_signal.unwrap_or(0.0),
        }
    }
}

#[derive(Debug)]
pub struct HarnessAgent {
    pub agent_id: String,
    pub harness: Harness,
    pub executed: u64,
}

impl HarnessAgent {
    pub fn new(harness: Harness) -> Self {
        HarnessAgent { agent_id: "harness-0".into(), harness, executed: 0 }
    }

    /// Runs one case and publishes its observation on the response topic.
    pub fn run_case(&mut self, case_id: &str, bytes: &[u8], bus: &dyn Transport) -> Result<Observation, HarnessError> {
        let obs = self.harness.execute(case_id, bytes);
        self.executed += 1;
        obs.publish(bus, &self.agent_id)?;
        Ok(obs)
    }
}

/// A stretch of cases during which the target was down.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashEvent {
    /// Case after which the target was first seen down.
    pub opened_by: String,
    /// Case after which it was first seen alive again.
    pub closed_by: Option<String>,
}

/// Opens an event on every transition into down and closes it at the next
/// alive probe. Degraded neither opens nor closes one.
pub fn crash_ledger<'a>(seq: impl IntoIterator<Item = (&'a str, Liveness)>) -> Vec<CrashEvent> {
    let mut events: Vec<CrashEvent> = Vec::new();
    let mut down = false;
    for (case, l) in seq {
        match l {
            Liveness::Down if !down => {
                down = true;
                events.push(CrashEvent { opened_by: case.to_string(), closed_by: None });
            }
            Liveness::Alive if down => {
                down = false;
                if let Some(e) = events.last_mut() {
                    e.closed_by = Some(case.to_string());
                }
            }
            _ => {}
        }
    }
    events
}
