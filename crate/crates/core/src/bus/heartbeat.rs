use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

use super::{Topic, Transport};
use crate::clock::SharedClock;

pub fn heartbeat_payload(agent_id: &str) -> Value {
    json!({ "agent_id": agent_id, "status": "alive" })
}

/// Polled heartbeat schedule, for agents driven by an external loop.
#[derive(Debug, Clone)]
pub struct Heartbeater {
    pub agent_id: String,
    pub interval_ms: u64,
    next_due: u64,
    paused: bool,
}

impl Heartbeater {
    pub fn new(agent_id: &str, interval_ms: u64, now: u64) -> Self {
        Heartbeater { agent_id: agent_id.to_string(), interval_ms: interval_ms.max(1), next_due: now, paused: false }
    }

    /// A paused agent stops sending; this is how tests and the kill hook simulate a hung agent.
    pub fn set_paused(&mut self, paused: bool) {
        self.paused = paused;
    }

    /// Sends every heartbeat that has come due by `now`; returns how many were sent.
    pub fn poll(&mut self, now: u64, bus: &dyn Transport) -> usize {
        let mut sent = 0;
        while now >= self.next_due {
            self.next_due += self.interval_ms;
            if self.paused {
                continue;
            }
            if bus.publish(Topic::Heartbeat, "heartbeat", heartbeat_payload(&self.agent_id), &self.agent_id).is_ok() {
                sent += 1;
            }
        }
        sent
    }
}

/// Blocking loop for agents on their own thread; returns when `stop` is set.
pub fn heartbeat_loop(bus: Arc<dyn Transport>, clock: SharedClock, agent_id: &str, interval_ms: u64, stop: Arc<AtomicBool>) {
    let mut hb = Heartbeater::new(agent_id, interval_ms, clock.now_ms());
    while !stop.load(Ordering::SeqCst) {
        hb.poll(clock.now_ms(), bus.as_ref());
        clock.sleep_ms(interval_ms.min(50));
    }
}
