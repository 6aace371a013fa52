use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use crossbeam_channel::{unbounded, Sender};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{check_schema, Ack, BusError, BusMessage, Subscription, Topic, Transport, DEFAULT_BUFFER_CAPACITY};
use crate::clock::{SharedClock, SystemClock};

/// Message accounting. `published - delivered - buffered == dropped` holds at all times.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusStats {
    pub published: u64,
    pub delivered: u64,
    pub buffered: u64,
    pub dropped: u64,
}

#[derive(Debug)]
struct Subscriber {
    agent_id: String,
    tx: Sender<BusMessage>,
}

#[derive(Debug)]
struct State {
    subs: BTreeMap<Topic, Vec<Subscriber>>,
    up: bool,
    buffer: VecDeque<BusMessage>,
    capacity: usize,
    seqs: HashMap<(String, Topic), u64>,
    stats: BusStats,
}

/// In-process transport. While marked down, publishes are buffered (oldest
/// dropped beyond capacity) and flushed in order when it comes back up.
#[derive(Debug, Clone)]
pub struct InProcBus {
    state: Arc<Mutex<State>>,
    clock: SharedClock,
}

impl Default for InProcBus {
    fn default() -> Self {
        Self::new(SystemClock::shared(), DEFAULT_BUFFER_CAPACITY)
    }
}

impl InProcBus {
    pub fn new(clock: SharedClock, capacity: usize) -> Self {
        InProcBus {
            state: Arc::new(Mutex::new(State {
                subs: BTreeMap::new(),
                up: true,
                buffer: VecDeque::new(),
                capacity: capacity.max(1),
                seqs: HashMap::new(),
                stats: BusStats::default(),
            })),
            clock,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn stats(&self) -> BusStats {
        self.lock().stats
    }

    pub fn is_up(&self) -> bool {
        self.lock().up
    }

    /// Takes the transport down or brings it back; coming up flushes the buffer.
    pub fn set_up(&self, up: bool) {
        let mut st = self.lock();
        st.up = up;
        if up {
            while let Some(msg) = st.buffer.pop_front() {
                st.stats.buffered -= 1;
                fan_out(&mut st, msg);
            }
        }
    }

    pub fn subscriber_count(&self, topic: Topic) -> usize {
        self.lock().subs.get(&topic).map_or(0, Vec::len)
    }

    /// Drops every subscription held by `agent_id`.
    pub fn unsubscribe_all(&self, agent_id: &str) {
        let mut st = self.lock();
        for subs in st.subs.values_mut() {
            subs.retain(|s| s.agent_id != agent_id);
        }
    }
}

fn fan_out(st: &mut State, msg: BusMessage) -> usize {
    st.stats.delivered += 1;
    let Some(subs) = st.subs.get_mut(&msg.topic) else {
        return 0;
    };
    subs.retain(|s| s.tx.send(msg.clone()).is_ok());
    subs.len()
}

fn enqueue(st: &mut State, msg: BusMessage) -> Ack {
    st.stats.published += 1;
    let seq = msg.seq;
    if st.up {
        let recipients = fan_out(st, msg);
        return Ack { seq, recipients, buffered: false };
    }
    if st.buffer.len() >= st.capacity {
        st.buffer.pop_front();
        st.stats.buffered -= 1;
        st.stats.dropped += 1;
        tracing::warn!(dropped = st.stats.dropped, "bus buffer overflow, oldest message dropped");
    }
    st.buffer.push_back(msg);
    st.stats.buffered += 1;
    Ack { seq, recipients: 0, buffered: true }
}

impl Transport for InProcBus {
    fn publish(&self, topic: Topic, event: &str, data: Value, sender: &str) -> Result<Ack, BusError> {
        check_schema(topic, event, &data)?;
        let sent_at = self.clock.now_ms();
        let mut st = self.lock();
        let seq = st.seqs.entry((sender.to_string(), topic)).or_insert(0);
        *seq += 1;
        let msg = BusMessage { topic, event: event.to_string(), data, sender: sender.to_string(), seq: *seq, sent_at };
        Ok(enqueue(&mut st, msg))
    }

    fn subscribe(&self, topic: Topic, agent_id: &str) -> Result<Subscription, BusError> {
        let (tx, rx) = unbounded();
        self.lock().subs.entry(topic).or_default().push(Subscriber { agent_id: agent_id.to_string(), tx });
        Ok(Subscription::new(topic, agent_id, rx))
    }
}
