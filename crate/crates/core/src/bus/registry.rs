//! Agent registry kept by the monitor: heartbeat bookkeeping, failure
//! detection, and least-loaded task redistribution.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seed,
    Mutation,
    Feedback,
    Harness,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Seed => "seed",
            Role::Mutation => "mutation",
            Role::Feedback => "feedback",
            Role::Harness => "harness",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentStatus {
    Alive,
    Suspect,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub role: Role,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: String,
    pub role: Role,
    pub last_heartbeat: u64,
    pub assigned_tasks: Vec<Task>,
    pub status: AgentStatus,
}

/// Announcements the monitor publishes on the control topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ControlEvent {
    AgentFailed { agent_id: String, at: u64 },
    Reassigned { task_id: String, from: String, to: String, at: u64 },
    Parked { task_id: String, from: String, at: u64 },
    Assigned { task_id: String, to: String, at: u64 },
}

impl ControlEvent {
    pub fn name(&self) -> &'static str {
        match self {
            ControlEvent::AgentFailed { .. } => "agent_failed",
            ControlEvent::Reassigned { .. } => "reassigned",
            ControlEvent::Parked { .. } => "parked",
            ControlEvent::Assigned { .. } => "assigned",
        }
    }

    /// Payload without the `event` tag, for the bus `data` field.
    pub fn data(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("control events serialize");
        if let Some(o) = v.as_object_mut() {
            o.remove("event");
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("agent `{0}` is not registered")]
    UnknownAgent(String),
    #[error("no alive {role} agent can take over; {parked} task(s) parked")]
    NoCandidateAgents { role: Role, parked: usize },
}

#[derive(Debug, Clone)]
pub struct Registry {
    agents: BTreeMap<String, AgentRecord>,
    parked: BTreeMap<Role, Vec<(String, Task)>>,
    pub interval_ms: u64,
    pub timeout_ms: u64,
}

impl Registry {
    /// Failure timeout is `timeout_ms`; an agent is suspect after one missed interval.
    pub fn new(interval_ms: u64, timeout_ms: u64) -> Self {
        assert!(timeout_ms > interval_ms, "failure timeout must exceed the heartbeat interval");
        Registry { agents: BTreeMap::new(), parked: BTreeMap::new(), interval_ms, timeout_ms }
    }

    pub fn agent(&self, id: &str) -> Option<&AgentRecord> {
        self.agents.get(id)
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentRecord> {
        self.agents.values()
    }

    pub fn parked(&self, role: Role) -> &[(String, Task)] {
        self.parked.get(&role).map_or(&[], Vec::as_slice)
    }

    pub fn alive(&self, role: Role) -> Vec<&AgentRecord> {
        self.agents.values().filter(|a| a.role == role && a.status != AgentStatus::Failed).collect()
    }

    /// Registers (or revives) an agent. Parked tasks of its role are handed out again.
    pub fn register(&mut self, agent_id: &str, role: Role, now: u64) -> Vec<ControlEvent> {
        let rec = self.agents.entry(agent_id.to_string()).or_insert_with(|| AgentRecord {
            agent_id: agent_id.to_string(),
            role,
            last_heartbeat: now,
            assigned_tasks: Vec::new(),
            status: AgentStatus::Alive,
        });
        rec.last_heartbeat = now;
        rec.status = AgentStatus::Alive;
        self.unpark(role, now)
    }

    /// Records a heartbeat. A failed agent that heartbeats again is revived with no tasks.
    pub fn heartbeat(&mut self, agent_id: &str, now: u64) -> Result<Vec<ControlEvent>, RegistryError> {
        let rec = self.agents.get_mut(agent_id).ok_or_else(|| RegistryError::UnknownAgent(agent_id.into()))?;
        rec.last_heartbeat = rec.last_heartbeat.max(now);
        let revived = rec.status == AgentStatus::Failed;
        rec.status = AgentStatus::Alive;
        let role = rec.role;
        Ok(if revived { self.unpark(role, now) } else { Vec::new() })
    }

    fn unpark(&mut self, role: Role, now: u64) -> Vec<ControlEvent> {
        let waiting = self.parked.remove(&role).unwrap_or_default();
        let mut events = Vec::new();
        for (from, task) in waiting {
            match self.least_loaded(role) {
                Some(to) => {
                    events.push(ControlEvent::Reassigned { task_id: task.id.clone(), from, to: to.clone(), at: now });
                    self.agents.get_mut(&to).expect("candidate exists").assigned_tasks.push(task);
                }
                None => self.parked.entry(role).or_default().push((from, task)),
            }
        }
        events
    }

    fn least_loaded(&self, role: Role) -> Option<String> {
        self.agents
            .values()
            .filter(|a| a.role == role && a.status == AgentStatus::Alive)
            .min_by(|a, b| a.assigned_tasks.len().cmp(&b.assigned_tasks.len()).then_with(|| a.agent_id.cmp(&b.agent_id)))
            .map(|a| a.agent_id.clone())
    }

    /// Assigns a new task to the least-loaded alive agent of its role, or parks it.
    pub fn assign(&mut self, task: Task, now: u64) -> ControlEvent {
        match self.least_loaded(task.role) {
            Some(to) => {
                let ev = ControlEvent::Assigned { task_id: task.id.clone(), to: to.clone(), at: now };
                self.agents.get_mut(&to).expect("candidate exists").assigned_tasks.push(task);
                ev
            }
            None => {
                let ev = ControlEvent::Parked { task_id: task.id.clone(), from: String::new(), at: now };
                self.parked.entry(task.role).or_default().push((String::new(), task));
                ev
            }
        }
    }

    /// Removes a finished task from whichever agent holds it.
    pub fn complete(&mut self, task_id: &str) -> bool {
        for a in self.agents.values_mut() {
            if let Some(i) = a.assigned_tasks.iter().position(|t| t.id == task_id) {
                a.assigned_tasks.remove(i);
                return true;
            }
        }
        false
    }

    /// Marks agents silent for longer than the timeout as failed and returns the
    /// ones that changed state in this scan.
    pub fn detect_failures(&mut self, now: u64) -> Vec<String> {
        let mut failed = Vec::new();
        for a in self.agents.values_mut() {
            if a.status == AgentStatus::Failed {
                continue;
            }
            let silent = now.saturating_sub(a.last_heartbeat);
            if silent > self.timeout_ms {
                a.status = AgentStatus::Failed;
                failed.push(a.agent_id.clone());
            } else if silent > self.interval_ms {
                a.status = AgentStatus::Suspect;
            } else {
                a.status = AgentStatus::Alive;
            }
        }
        failed
    }

    /// Moves every task of a failed agent to alive peers of the same role, one
    /// task at a time to the currently least-loaded peer (ties by agent id).
    pub fn redistribute(&mut self, failed: &str, now: u64) -> Result<(BTreeMap<String, String>, Vec<ControlEvent>), RegistryError> {
        let rec = self.agents.get_mut(failed).ok_or_else(|| RegistryError::UnknownAgent(failed.into()))?;
        let role = rec.role;
        rec.status = AgentStatus::Failed;
        let tasks = std::mem::take(&mut rec.assigned_tasks);
        let mut map = BTreeMap::new();
        let mut events = vec![ControlEvent::AgentFailed { agent_id: failed.to_string(), at: now }];
        if tasks.is_empty() {
            return Ok((map, events));
        }
        if self.least_loaded(role).is_none() {
            let n = tasks.len();
            for t in tasks {
                events.push(ControlEvent::Parked { task_id: t.id.clone(), from: failed.to_string(), at: now });
                self.parked.entry(role).or_default().push((failed.to_string(), t));
            }
            tracing::warn!(agent = failed, parked = n, "no candidate agents, tasks parked");
            return Err(RegistryError::NoCandidateAgents { role, parked: n });
        }
        for t in tasks {
            let to = self.least_loaded(role).expect("checked above");
            map.insert(t.id.clone(), to.clone());
            events.push(ControlEvent::Reassigned { task_id: t.id.clone(), from: failed.to_string(), to: to.clone(), at: now });
            self.agents.get_mut(&to).expect("candidate exists").assigned_tasks.push(t);
        }
        Ok((map, events))
    }

    /// Every task id currently held or parked; used to check nothing is lost or duplicated.
    pub fn all_task_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .agents
            .values()
            .flat_map(|a| a.assigned_tasks.iter().map(|t| t.id.clone()))
            .chain(self.parked.values().flatten().map(|(_, t)| t.id.clone()))
            .collect();
        ids.sort();
        ids
    }
}
