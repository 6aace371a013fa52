//! Length-prefixed JSON over TCP. The broker wraps an [`InProcBus`]; seed
//! traffic, test cases and everything else each get their own port.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::unbounded;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Ack, BusError, BusMessage, InProcBus, Subscription, Topic, Transport};

const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcpPorts {
    pub seed: u16,
    pub test_case: u16,
    pub other: u16,
}

impl Default for TcpPorts {
    fn default() -> Self {
        TcpPorts { seed: 5555, test_case: 5556, other: 5557 }
    }
}

impl TcpPorts {
    /// All zero: let the OS pick, then read the bound ports back from the broker.
    pub fn ephemeral() -> Self {
        TcpPorts { seed: 0, test_case: 0, other: 0 }
    }

    pub fn for_topic(&self, topic: Topic) -> u16 {
        match topic {
            Topic::Seed => self.seed,
            Topic::TestCase => self.test_case,
            _ => self.other,
        }
    }
}

/// Writes one frame: 4-byte big-endian length, then the JSON document.
pub fn write_frame(w: &mut impl Write, doc: &Value) -> io::Result<()> {
    let body = serde_json::to_vec(doc).map_err(io::Error::other)?;
    let len = u32::try_from(body.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean EOF before the length prefix.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Value>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {n} bytes exceeds limit")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request {
    Subscribe { topic: Topic, agent_id: String },
    Publish { topic: Topic, event: String, data: Value, sender: String },
}

pub struct TcpBroker {
    inner: InProcBus,
    ports: TcpPorts,
    stop: Arc<AtomicBool>,
    acceptors: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for TcpBroker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpBroker").field("ports", &self.ports).finish_non_exhaustive()
    }
}

impl TcpBroker {
    pub fn bind(host: IpAddr, ports: TcpPorts, inner: InProcBus) -> io::Result<Self> {
        let stop = Arc::new(AtomicBool::new(false));
        let mut bound = ports;
        let mut acceptors = Vec::new();
        for (slot, topics) in [
            (&mut bound.seed, vec![Topic::Seed]),
            (&mut bound.test_case, vec![Topic::TestCase]),
            (&mut bound.other, vec![Topic::Response, Topic::Strategy, Topic::Heartbeat, Topic::Control]),
        ] {
            let listener = TcpListener::bind(SocketAddr::new(host, *slot))?;
            *slot = listener.local_addr()?.port();
            listener.set_nonblocking(true)?;
            let (inner, stop) = (inner.clone(), stop.clone());
            acceptors.push(thread::spawn(move || accept_loop(listener, topics, inner, stop)));
        }
        Ok(TcpBroker { inner, ports: bound, stop, acceptors })
    }

    pub fn localhost(ports: TcpPorts, inner: InProcBus) -> io::Result<Self> {
        Self::bind(IpAddr::V4(Ipv4Addr::LOCALHOST), ports, inner)
    }

    /// The ports actually bound.
    pub fn ports(&self) -> TcpPorts {
        self.ports
    }

    pub fn inner(&self) -> &InProcBus {
        &self.inner
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for h in self.acceptors.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for TcpBroker {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

fn accept_loop(listener: TcpListener, topics: Vec<Topic>, inner: InProcBus, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let (topics, inner, stop) = (topics.clone(), inner.clone(), stop.clone());
                thread::spawn(move || {
                    if let Err(e) = serve(stream, &topics, inner, stop) {
                        tracing::debug!(error = %e, "bus connection closed");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                tracing::warn!(error = %e, "bus accept failed");
                thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

fn serve(stream: TcpStream, topics: &[Topic], inner: InProcBus, stop: Arc<AtomicBool>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = stream;
    let reply = |doc: Value| -> io::Result<()> {
        let mut w = writer.lock().unwrap_or_else(|p| p.into_inner());
        write_frame(&mut *w, &doc)
    };
    while let Some(doc) = read_frame(&mut reader)? {
        let req: Request = match serde_json::from_value(doc) {
            Ok(r) => r,
            Err(e) => {
                reply(json!({"op": "error", "reason": format!("bad request: {e}")}))?;
                continue;
            }
        };
        let topic = match &req {
            Request::Subscribe { topic, .. } | Request::Publish { topic, .. } => *topic,
        };
        if !topics.contains(&topic) {
            reply(json!({"op": "error", "reason": format!("topic {topic} is not served on this port")}))?;
            continue;
        }
        match req {
            Request::Publish { topic, event, data, sender } => match inner.publish(topic, &event, data, &sender) {
                Ok(ack) => reply(json!({"op": "ack", "seq": ack.seq, "recipients": ack.recipients, "buffered": ack.buffered}))?,
                Err(e) => reply(json!({"op": "error", "reason": e.to_string(), "schema": matches!(e, BusError::SchemaViolation { .. })}))?,
            },
            Request::Subscribe { topic, agent_id } => {
                let sub = inner.subscribe(topic, &agent_id).map_err(io::Error::other)?;
                reply(json!({"op": "subscribed", "topic": topic}))?;
                let (w, stop) = (writer.clone(), stop.clone());
                thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        let Some(msg) = sub.recv_timeout(Duration::from_millis(50)) else {
                            continue;
                        };
                        let doc = json!({"op": "message", "message": msg});
                        let mut w = w.lock().unwrap_or_else(|p| p.into_inner());
                        if write_frame(&mut *w, &doc).is_err() {
                            break;
                        }
                    }
                });
            }
        }
    }
    Ok(())
}

/// Client side of the broker; implements the same [`Transport`] contract.
#[derive(Debug)]
pub struct TcpBusClient {
    host: IpAddr,
    ports: TcpPorts,
    timeout: Duration,
    publishers: Mutex<HashMap<u16, TcpStream>>,
}

impl TcpBusClient {
    pub fn new(host: IpAddr, ports: TcpPorts) -> Self {
        TcpBusClient { host, ports, timeout: Duration::from_secs(5), publishers: Mutex::new(HashMap::new()) }
    }

    fn connect(&self, port: u16) -> Result<TcpStream, BusError> {
        let addr = SocketAddr::new(self.host, port);
        let s = TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| BusError::Unavailable(format!("{addr}: {e}")))?;
        s.set_nodelay(true).ok();
        s.set_read_timeout(Some(self.timeout)).ok();
        Ok(s)
    }

    fn request(&self, port: u16, doc: &Value) -> Result<Value, BusError> {
        let mut pubs = self.publishers.lock().unwrap_or_else(|p| p.into_inner());
        for attempt in 0..2 {
            if let std::collections::hash_map::Entry::Vacant(e) = pubs.entry(port) {
                e.insert(self.connect(port)?);
            }
            let s = pubs.get_mut(&port).expect("inserted above");
            let res = write_frame(s, doc).and_then(|_| read_frame(s));
            match res {
                Ok(Some(v)) => return Ok(v),
                Ok(None) | Err(_) if attempt == 0 => {
                    pubs.remove(&port);
                }
                Ok(None) => return Err(BusError::Unavailable("broker closed the connection".into())),
                Err(e) => return Err(BusError::Unavailable(e.to_string())),
            }
        }
        Err(BusError::Unavailable("broker unreachable".into()))
    }
}

fn remote_error(topic: Topic, v: &Value) -> BusError {
    let reason = v["reason"].as_str().unwrap_or("unknown error").to_string();
    if v["schema"].as_bool() == Some(true) {
        BusError::SchemaViolation { topic, reason }
    } else {
        BusError::Unavailable(reason)
    }
}

impl Transport for TcpBusClient {
    fn publish(&self, topic: Topic, event: &str, data: Value, sender: &str) -> Result<Ack, BusError> {
        super::check_schema(topic, event, &data)?;
        let doc = json!({"op": "publish", "topic": topic, "event": event, "data": data, "sender": sender});
        let v = self.request(self.ports.for_topic(topic), &doc)?;
        if v["op"] != "ack" {
            return Err(remote_error(topic, &v));
        }
        Ok(Ack {
            seq: v["seq"].as_u64().unwrap_or(0),
            recipients: v["recipients"].as_u64().unwrap_or(0) as usize,
            buffered: v["buffered"].as_bool().unwrap_or(false),
        })
    }

    fn subscribe(&self, topic: Topic, agent_id: &str) -> Result<Subscription, BusError> {
        let mut s = self.connect(self.ports.for_topic(topic))?;
        let doc = json!({"op": "subscribe", "topic": topic, "agent_id": agent_id});
        write_frame(&mut s, &doc).map_err(|e| BusError::Unavailable(e.to_string()))?;
        let v = read_frame(&mut s)
            .map_err(|e| BusError::Unavailable(e.to_string()))?
            .ok_or_else(|| BusError::Unavailable("broker closed the connection".into()))?;
        if v["op"] != "subscribed" {
            return Err(remote_error(topic, &v));
        }
        s.set_read_timeout(None).ok();
        let (tx, rx) = unbounded();
        thread::spawn(move || {
            while let Ok(Some(v)) = read_frame(&mut s) {
                let Ok(msg) = serde_json::from_value::<BusMessage>(v["message"].clone()) else {
                    continue;
                };
                if tx.send(msg).is_err() {
                    let _ = s.shutdown(Shutdown::Both);
                    break;
                }
            }
        });
        Ok(Subscription::new(topic, agent_id, rx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;

    #[test]
    fn frame_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &json!({"a": 1})).unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 7]);
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r).unwrap(), Some(json!({"a": 1})));
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn default_ports() {
        let p = TcpPorts::default();
        assert_eq!((p.for_topic(Topic::Seed), p.for_topic(Topic::TestCase), p.for_topic(Topic::Strategy)), (5555, 5556, 5557));
    }

    #[test]
    fn publish_and_subscribe_over_tcp() {
        let broker = TcpBroker::localhost(TcpPorts::ephemeral(), InProcBus::new(VirtualClock::shared(), 100)).unwrap();
        let client = TcpBusClient::new(IpAddr::V4(Ipv4Addr::LOCALHOST), broker.ports());
        let sub = client.subscribe(Topic::Heartbeat, "monitor").unwrap();
        let ack = client.publish(Topic::Heartbeat, "heartbeat", json!({"agent_id": "a", "status": "alive"}), "a").unwrap();
        assert_eq!(ack.recipients, 1);
        let got = sub.recv_timeout(Duration::from_secs(5)).expect("message relayed");
        assert_eq!(got.sender, "a");
        assert_eq!(got.seq, 1);
        let err = client.publish(Topic::Heartbeat, "heartbeat", json!({"agent_id": "a"}), "a").unwrap_err();
        assert!(matches!(err, BusError::SchemaViolation { .. }));
    }
}
