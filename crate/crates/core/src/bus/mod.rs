//! Topic-based publish/subscribe between agents, plus the agent registry used
//! for heartbeat failure detection and task redistribution.

mod heartbeat;
mod inproc;
mod registry;
mod tcp;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use heartbeat::{heartbeat_loop, heartbeat_payload, Heartbeater};
pub use inproc::{BusStats, InProcBus};
pub use registry::{AgentRecord, AgentStatus, ControlEvent, Registry, RegistryError, Role, Task};
pub use tcp::{read_frame, write_frame, TcpBroker, TcpBusClient, TcpPorts};

pub const DEFAULT_BUFFER_CAPACITY: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topic {
    Seed,
    TestCase,
    Response,
    Strategy,
    Heartbeat,
    Control,
}

impl Topic {
    pub const ALL: [Topic; 6] = [
        Topic::Seed,
        Topic::TestCase,
        Topic::Response,
        Topic::Strategy,
        Topic::Heartbeat,
        Topic::Control,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::Seed => "seed",
            Topic::TestCase => "test_case",
            Topic::Response => "response",
            Topic::Strategy => "strategy",
            Topic::Heartbeat => "heartbeat",
            Topic::Control => "control",
        }
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topic {
    type Err = BusError;

    fn from_str(s: &str) -> Result<Self, BusError> {
        Topic::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| BusError::UnknownTopic(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusMessage {
    pub topic: Topic,
    pub event: String,
    pub data: Value,
    pub sender: String,
    /// Per (sender, topic) counter assigned by the bus, starting at 1.
    pub seq: u64,
    /// Milliseconds on the bus clock.
    pub sent_at: u64,
}

impl BusMessage {
    /// The `{"event", "data"}` document carried on the wire.
    pub fn document(&self) -> Value {
        serde_json::json!({ "event": self.event, "data": self.data })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("schema violation on topic {topic}: {reason}")]
    SchemaViolation { topic: Topic, reason: String },
    #[error("bus transport unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub seq: u64,
    /// Subscribers the message was handed to (0 when buffered).
    pub recipients: usize,
    pub buffered: bool,
}

/// The contract both transports implement.
pub trait Transport: Send + Sync {
    fn publish(&self, topic: Topic, event: &str, data: Value, sender: &str) -> Result<Ack, BusError>;
    fn subscribe(&self, topic: Topic, agent_id: &str) -> Result<Subscription, BusError>;
}

/// Ordered stream of messages published on one topic after subscription.
#[derive(Debug)]
pub struct Subscription {
    pub topic: Topic,
    pub agent_id: String,
    rx: Receiver<BusMessage>,
}

impl Subscription {
    pub(crate) fn new(topic: Topic, agent_id: &str, rx: Receiver<BusMessage>) -> Self {
        Subscription { topic, agent_id: agent_id.to_string(), rx }
    }

    pub fn try_recv(&self) -> Option<BusMessage> {
        self.rx.try_recv().ok()
    }

    /// `None` on timeout or when the bus is gone.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<BusMessage> {
        match self.rx.recv_timeout(timeout) {
            Ok(m) => Some(m),
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => None,
        }
    }

    pub fn drain(&self) -> Vec<BusMessage> {
        self.rx.try_iter().collect()
    }

    pub fn len(&self) -> usize {
        self.rx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rx.is_empty()
    }
}

fn exact_keys(topic: Topic, data: &Map<String, Value>, keys: &[&str]) -> Result<(), BusError> {
    let mut got: Vec<&str> = data.keys().map(String::as_str).collect();
    got.sort_unstable();
    let mut want = keys.to_vec();
    want.sort_unstable();
    if got != want {
        return Err(BusError::SchemaViolation {
            topic,
            reason: format!("expected keys {want:?}, got {got:?}"),
        });
    }
    Ok(())
}

/// Checks a message against the wire schema of its topic.
pub fn check_schema(topic: Topic, event: &str, data: &Value) -> Result<(), BusError> {
    let violation = |reason: String| Err(BusError::SchemaViolation { topic, reason });
    let Some(obj) = data.as_object() else {
        return violation("data must be an object".into());
    };
    let expected_event = match topic {
        Topic::Seed => Some("seed"),
        Topic::TestCase => Some("test_case"),
        Topic::Response => Some("observation"),
        Topic::Strategy => Some("strategy"),
        Topic::Heartbeat => Some("heartbeat"),
        Topic::Control => None,
    };
    if let Some(e) = expected_event {
        if event != e {
            return violation(format!("event must be `{e}`, got `{event}`"));
        }
    } else if event.is_empty() {
        return violation("control events need a name".into());
    }
    let str_field = |k: &str| obj.get(k).is_some_and(Value::is_string);
    match topic {
        Topic::Seed => {
            exact_keys(topic, obj, &["seed_id", "protocol_id", "fields", "provenance"])?;
            if !obj["fields"].is_object() || !str_field("seed_id") || !str_field("protocol_id") {
                return violation("seed fields must be an object with string ids".into());
            }
        }
        Topic::TestCase => {
            exact_keys(topic, obj, &["case_id", "seed_id", "protocol_id", "mutations", "hex"])?;
            let hex_ok = obj["hex"]
                .as_str()
                .is_some_and(|h| h.len() % 2 == 0 && h.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)));
            if !hex_ok || !obj["mutations"].is_array() {
                return violation("test case needs lowercase hex and a mutation list".into());
            }
        }
        Topic::Response => {
            for k in ["case_id", "outcome", "response_time_ms", "liveness_after"] {
                if !obj.contains_key(k) {
                    return violation(format!("observation missing `{k}`"));
                }
            }
        }
        Topic::Strategy => {
            exact_keys(topic, obj, &["rho", "field_priorities", "direction_weights", "feedback_score"])?;
            if !obj["rho"].is_number() || !obj["feedback_score"].is_number() {
                return violation("rho and feedback_score must be numbers".into());
            }
        }
        Topic::Heartbeat => {
            exact_keys(topic, obj, &["agent_id", "status"])?;
            if !str_field("agent_id") || !str_field("status") {
                return violation("heartbeat fields must be strings".into());
            }
        }
        Topic::Control => {}
    }
    Ok(())
}
