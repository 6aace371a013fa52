//! Modbus/TCP server with three optional seeded bugs.
//!
//! Each connection is read to EOF, then every complete frame in the buffer is
//! answered in order. Bugs:
//! - `length_overflow_crash`: a frame whose MBAP length exceeds the bytes that
//!   follow by more than 2 hangs the connection and takes the listener down.
//! - `session_exhaustion`: a connection that ends inside a frame leaks its
//!   session; at `session_limit` leaked sessions the listener goes away.
//! - `io_halt_on_burst`: 5 malformed FC 16 writes within 1 s freeze the write
//!   path; later write requests hang.
//!
//! All three persist until [`Simulator::restart`].

use std::collections::{BTreeSet, VecDeque};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use socket2::{Domain, Socket, Type};
use thiserror::Error;

use super::StallSignal;
use crate::clock::SharedClock;

pub const RESOURCE_TAG: [u8; 2] = [0xFF, b'R'];
const MAX_PDU_LEN: usize = 253;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bug {
    SessionExhaustion,
    LengthOverflowCrash,
    IoHaltOnBurst,
}

impl Bug {
    pub const ALL: [Bug; 3] = [Bug::SessionExhaustion, Bug::LengthOverflowCrash, Bug::IoHaltOnBurst];

    pub fn as_str(self) -> &'static str {
        match self {
            Bug::SessionExhaustion => "session_exhaustion",
            Bug::LengthOverflowCrash => "length_overflow_crash",
            Bug::IoHaltOnBurst => "io_halt_on_burst",
        }
    }
}

impl FromStr for Bug {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Bug::ALL.into_iter().find(|b| b.as_str() == s).ok_or_else(|| format!("unknown bug `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub bugs_enabled: BTreeSet<Bug>,
    pub session_limit: usize,
    pub resource_channel: bool,
    pub base_latency_ms: u64,
    pub degraded_latency_ms: u64,
    /// Session utilization from which replies are slowed down.
    pub degraded_utilization: f64,
    pub halt_burst: usize,
    pub halt_window_ms: u64,
    pub crash_margin: usize,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            bugs_enabled: BTreeSet::new(),
            session_limit: 64,
            resource_channel: false,
            base_latency_ms: 1,
            degraded_latency_ms: 300,
            degraded_utilization: 0.9,
            halt_burst: 5,
            halt_window_ms: 1000,
            crash_margin: 2,
        }
    }
}

impl SimulatorConfig {
    pub fn with_bugs(bugs: &[Bug]) -> Self {
        SimulatorConfig { bugs_enabled: bugs.iter().copied().collect(), ..Default::default() }
    }

    pub fn all_bugs() -> Self {
        Self::with_bugs(&Bug::ALL)
    }

    fn has(&self, bug: Bug) -> bool {
        self.bugs_enabled.contains(&bug)
    }
}

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("port {0} is in use")]
    PortInUse(u16),
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Reply,
    Exception,
    Drop,
    Leak,
    Crash,
    Hang,
    Halt,
    Exhausted,
    Restart,
}

/// One record per request handled (plus lifecycle records).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub at_ms: u64,
    pub conn: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_code: Option<u8>,
    pub detail: String,
}

#[derive(Debug)]
struct State {
    coils: Vec<bool>,
    discrete: Vec<bool>,
    holding: Vec<u16>,
    input: Vec<u16>,
    active: usize,
    leaked: usize,
    malformed_writes: VecDeque<u64>,
    write_halted: bool,
    crashed: bool,
    generation: u64,
    next_conn: u64,
    listener: Option<TcpListener>,
    events: Vec<SimEvent>,
}

impl State {
    fn fresh(generation: u64, listener: Option<TcpListener>, events: Vec<SimEvent>) -> Self {
        let mut input = vec![0u16; 65536];
        for (i, r) in input.iter_mut().enumerate() {
            *r = i as u16;
        }
        State {
            coils: vec![false; 65536],
            discrete: (0..65536).map(|i| i % 3 == 0).collect(),
            holding: vec![0; 65536],
            input,
            active: 0,
            leaked: 0,
            malformed_writes: VecDeque::new(),
            write_halted: false,
            crashed: false,
            generation,
            next_conn: 0,
            listener,
            events,
        }
    }
}

#[derive(Debug)]
struct Inner {
    config: SimulatorConfig,
    addr: SocketAddr,
    clock: SharedClock,
    stall: StallSignal,
    stop: AtomicBool,
    state: Mutex<State>,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn event(&self, st: &mut State, conn: u64, kind: EventKind, fc: Option<u8>, detail: impl Into<String>) {
        st.events.push(SimEvent { at_ms: self.clock.now_ms(), conn, kind, function_code: fc, detail: detail.into() });
    }

    fn utilization(&self, st: &State) -> f64 {
        (st.active + st.leaked) as f64 / self.config.session_limit as f64
    }
}

/// Handle to a running simulator. Dropping it stops the server.
#[derive(Debug)]
pub struct Simulator {
    inner: Arc<Inner>,
    acceptor: Option<JoinHandle<()>>,
}

fn bind(addr: SocketAddr) -> Result<TcpListener, SimulatorError> {
    let sock = Socket::new(Domain::for_address(addr), Type::STREAM, None)?;
    sock.set_reuse_address(true)?;
    sock.bind(&addr.into()).map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => SimulatorError::PortInUse(addr.port()),
        _ => SimulatorError::Io(e),
    })?;
    sock.listen(128)?;
    let l: TcpListener = sock.into();
    l.set_nonblocking(true)?;
    Ok(l)
}

impl Simulator {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(
        config: SimulatorConfig,
        addr: SocketAddr,
        clock: SharedClock,
        stall: StallSignal,
    ) -> Result<Simulator, SimulatorError> {
        if config.session_limit == 0 {
            return Err(SimulatorError::Config("session_limit must be at least 1".into()));
        }
        let listener = bind(addr)?;
        let addr = listener.local_addr()?;
        let inner = Arc::new(Inner {
            config,
            addr,
            clock,
            stall,
            stop: AtomicBool::new(false),
            state: Mutex::new(State::fresh(0, Some(listener), Vec::new())),
        });
        let acceptor = {
            let inner = inner.clone();
            thread::spawn(move || accept_loop(inner))
        };
        Ok(Simulator { inner, acceptor: Some(acceptor) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.inner.addr
    }

    pub fn port(&self) -> u16 {
        self.inner.addr.port()
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.inner.config
    }

    pub fn is_listening(&self) -> bool {
        self.inner.lock().listener.is_some()
    }

    pub fn sessions_in_use(&self) -> usize {
        let st = self.inner.lock();
        st.active + st.leaked
    }

    pub fn write_halted(&self) -> bool {
        self.inner.lock().write_halted
    }

    pub fn events(&self) -> Vec<SimEvent> {
        self.inner.lock().events.clone()
    }

    pub fn take_events(&self) -> Vec<SimEvent> {
        std::mem::take(&mut self.inner.lock().events)
    }

    /// Clears every bug state, the data model and all sessions, and listens again.
    pub fn restart(&self) -> Result<(), SimulatorError> {
        let mut st = self.inner.lock();
        let listener = match st.listener.take() {
            Some(l) => l,
            None => bind(self.inner.addr)?,
        };
        let events = std::mem::take(&mut st.events);
        let generation = st.generation + 1;
        *st = State::fresh(generation, Some(listener), events);
        self.inner.event(&mut st, 0, EventKind::Restart, None, "restart");
        Ok(())
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.inner.stop.store(true, Ordering::SeqCst);
        self.inner.lock().listener = None;
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Simulator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(inner: Arc<Inner>) {
    while !inner.stop.load(Ordering::SeqCst) {
        let accepted = {
            let st = inner.lock();
            st.listener.as_ref().map(|l| l.accept())
        };
        match accepted {
            Some(Ok((stream, _))) => {
                let inner = inner.clone();
                thread::spawn(move || serve(inner, stream));
            }
            Some(Err(e)) if e.kind() != io::ErrorKind::WouldBlock => {
                tracing::debug!(error = %e, "simulator accept failed");
                thread::sleep(Duration::from_micros(200));
            }
            _ => thread::sleep(Duration::from_micros(200)),
        }
    }
}

enum Step {
    Reply(Vec<u8>),
    Hang,
}

fn serve(inner: Arc<Inner>, mut stream: TcpStream) {
    let (conn, generation) = {
        let mut st = inner.lock();
        st.next_conn += 1;
        st.active += 1;
        (st.next_conn, st.generation)
    };
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_secs(2)));
    let mut buf = Vec::new();
    let complete = stream.read_to_end(&mut buf).is_ok();
    let mut out = Vec::new();
    let mut leak = !complete && !buf.is_empty();
    let mut hang = false;
    let mut pos = 0usize;
    while complete && pos < buf.len() {
        let rem = &buf[pos..];
        if rem.len() < 7 {
            leak = true;
            break;
        }
        let tid = u16::from_be_bytes([rem[0], rem[1]]);
        let proto = u16::from_be_bytes([rem[2], rem[3]]);
        let len = u16::from_be_bytes([rem[4], rem[5]]) as usize;
        let unit = rem[6];
        if proto != 0 {
            let mut st = inner.lock();
            inner.event(&mut st, conn, EventKind::Drop, None, format!("protocol id {proto}"));
            break;
        }
        if !(2..=MAX_PDU_LEN + 1).contains(&len) {
            let mut st = inner.lock();
            inner.event(&mut st, conn, EventKind::Drop, None, format!("length {len} out of range"));
            break;
        }
        let need = 6 + len;
        if rem.len() < need {
            let short = need - rem.len();
            if inner.config.has(Bug::LengthOverflowCrash) && short > inner.config.crash_margin {
                crash(&inner, conn, short);
                hang = true;
            } else {
                leak = true;
            }
            break;
        }
        match handle(&inner, conn, &rem[7..need]) {
            Step::Reply(pdu) => {
                out.extend_from_slice(&tid.to_be_bytes());
                out.extend_from_slice(&[0, 0]);
                out.extend_from_slice(&((pdu.len() + 1) as u16).to_be_bytes());
                out.push(unit);
                out.extend_from_slice(&pdu);
            }
            Step::Hang => {
                hang = true;
                break;
            }
        }
        pos += need;
    }
    if hang {
        inner.stall.raise();
        // hold the connection open, unanswered, until restart or shutdown
        while !inner.stop.load(Ordering::SeqCst) && inner.lock().generation == generation {
            thread::sleep(Duration::from_millis(5));
        }
        let _ = stream.shutdown(Shutdown::Both);
        release(&inner, generation, false, conn);
        return;
    }
    // settle the session before the client can observe the close
    release(&inner, generation, leak, conn);
    if !out.is_empty() {
        if inner.config.resource_channel {
            let pct = {
                let st = inner.lock();
                ((st.active + st.leaked + 1) as f64 / inner.config.session_limit as f64 * 100.0).round().clamp(0.0, 100.0) as u8
            };
            out.extend_from_slice(&RESOURCE_TAG);
            out.push(pct);
        }
        let _ = stream.write_all(&out);
    }
    let _ = stream.shutdown(Shutdown::Write);
    // wait for the client to close so neither side keeps a TIME_WAIT entry
    let _ = stream.set_read_timeout(Some(Duration::from_millis(500)));
    let mut sink = [0u8; 64];
    let _ = stream.read(&mut sink);
}

fn release(inner: &Inner, generation: u64, leak: bool, conn: u64) {
    let mut st = inner.lock();
    if st.generation != generation {
        return;
    }
    st.active = st.active.saturating_sub(1);
    if leak && inner.config.has(Bug::SessionExhaustion) {
        st.leaked += 1;
        let held = st.leaked;
        inner.event(&mut st, conn, EventKind::Leak, None, format!("session leaked ({held} held)"));
        if st.leaked >= inner.config.session_limit && st.listener.is_some() {
            st.listener = None;
            inner.event(&mut st, conn, EventKind::Exhausted, None, "session pool exhausted, refusing connections");
        }
    }
}

fn crash(inner: &Inner, conn: u64, short: usize) {
    let mut st = inner.lock();
    st.crashed = true;
    st.listener = None;
    inner.event(&mut st, conn, EventKind::Crash, None, format!("declared length exceeds payload by {short}"));
}

fn exception(fc: u8, code: u8) -> Vec<u8> {
    vec![fc | 0x80, code]
}

fn be16(b: &[u8], i: usize) -> usize {
    u16::from_be_bytes([b[i], b[i + 1]]) as usize
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i)))
        .collect()
}

fn handle(inner: &Inner, conn: u64, pdu: &[u8]) -> Step {
    let cfg = &inner.config;
    let mut st = inner.lock();
    let fc = pdu[0];
    let d = &pdu[1..];
    let is_write = matches!(fc, 5 | 6 | 15 | 16);
    if is_write && st.write_halted {
        inner.event(&mut st, conn, EventKind::Hang, Some(fc), "write path halted");
        return Step::Hang;
    }
    let latency = if inner.utilization(&st) >= cfg.degraded_utilization && cfg.has(Bug::SessionExhaustion) {
        cfg.degraded_latency_ms
    } else {
        cfg.base_latency_ms
    };
    let reply = match fc {
        1 | 2 | 3 | 4 => {
            let bits = fc <= 2;
            let max_qty = if bits { 2000 } else { 125 };
            if d.len() != 4 {
                exception(fc, 3)
            } else {
                let (start, qty) = (be16(d, 0), be16(d, 2));
                if qty == 0 || qty > max_qty {
                    exception(fc, 3)
                } else if start + qty > 65536 {
                    exception(fc, 2)
                } else if bits {
                    let src = if fc == 1 { &st.coils } else { &st.discrete };
                    let packed = pack_bits(&src[start..start + qty]);
                    let mut r = vec![fc, packed.len() as u8];
                    r.extend(packed);
                    r
                } else {
                    let src = if fc == 3 { &st.holding } else { &st.input };
                    let mut r = vec![fc, (qty * 2) as u8];
                    for v in &src[start..start + qty] {
                        r.extend_from_slice(&v.to_be_bytes());
                    }
                    r
                }
            }
        }
        5 | 6 => {
            if d.len() != 4 {
                exception(fc, 3)
            } else {
                let (addr, value) = (be16(d, 0), be16(d, 2));
                if fc == 5 && value != 0 && value != 0xFF00 {
                    exception(fc, 3)
                } else {
                    if fc == 5 {
                        st.coils[addr] = value == 0xFF00;
                    } else {
                        st.holding[addr] = value as u16;
                    }
                    pdu.to_vec()
                }
            }
        }
        15 | 16 => {
            let coils = fc == 15;
            let ok_shape = d.len() >= 5;
            let (start, qty, bc) = if ok_shape { (be16(d, 0), be16(d, 2), d[4] as usize) } else { (0, 0, 0) };
            let max_qty = if coils { 1968 } else { 123 };
            let want_bc = if coils { qty.div_ceil(8) } else { qty * 2 };
            let well_formed = ok_shape && (1..=max_qty).contains(&qty) && bc == want_bc && d.len() - 5 == bc;
            if !well_formed {
                if fc == 16 {
                    malformed_write(inner, &mut st, conn);
                }
                exception(fc, 3)
            } else if start + qty > 65536 {
                exception(fc, 2)
            } else {
                let vals = &d[5..];
                if coils {
                    for i in 0..qty {
                        st.coils[start + i] = vals[i / 8] >> (i % 8) & 1 == 1;
                    }
                } else {
                    for i in 0..qty {
                        st.holding[start + i] = u16::from_be_bytes([vals[2 * i], vals[2 * i + 1]]);
                    }
                }
                let mut r = vec![fc];
                r.extend_from_slice(&d[..4]);
                r
            }
        }
        _ => exception(fc, 1),
    };
    let kind = if reply[0] & 0x80 != 0 { EventKind::Exception } else { EventKind::Reply };
    inner.event(&mut st, conn, kind, Some(fc), format!("{} byte reply", reply.len()));
    drop(st);
    inner.clock.sleep_ms(latency);
    Step::Reply(reply)
}

fn malformed_write(inner: &Inner, st: &mut State, conn: u64) {
    if !inner.config.has(Bug::IoHaltOnBurst) {
        return;
    }
    let now = inner.clock.now_ms();
    let window = inner.config.halt_window_ms;
    st.malformed_writes.push_back(now);
    while st.malformed_writes.front().is_some_and(|&t| now.saturating_sub(t) >= window) {
        st.malformed_writes.pop_front();
    }
    if st.malformed_writes.len() >= inner.config.halt_burst && !st.write_halted {
        st.write_halted = true;
        let n = st.malformed_writes.len();
        inner.event(st, conn, EventKind::Halt, Some(16), format!("{n} malformed writes within {window} ms"));
    }
}
