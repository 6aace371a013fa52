//! Feedback analysis: response classification, weighted severity, strategy
//! adjustment and anomaly records written back to the knowledge base.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::ops::{Add, Mul};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bus::{Ack, BusError, Topic, Transport};
use crate::kb::{EntryKind, KbError, KnowledgeStore, RuleEntry};
use crate::mutation::{MutationRecord, MutationStrategy};
use crate::protocol::{decode_frame, validate_frame, ProtocolSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Outcome {
    Reply {
        #[serde(with = "crate::protocol::hex_bytes")]
        bytes: Vec<u8>,
    },
    Timeout,
    ConnectionReset,
    ConnectionRefused,
}

impl Outcome {
    pub fn is_reply(&self) -> bool {
        matches!(self, Outcome::Reply { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Liveness {
    Alive,
    Degraded,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub case_id: String,
    pub outcome: Outcome,
    pub response_time_ms: u64,
    pub liveness_after: Liveness,
    /// Target-reported utilization, 0..=1 when present, 0 when unavailable.
    #[serde(default)]
    pub resource_signal: f64,
}

impl Observation {
    pub fn wire_data(&self) -> Value {
        serde_json::to_value(self).expect("observations serialize")
    }

    pub fn publish(&self, bus: &dyn Transport, sender: &str) -> Result<Ack, BusError> {
        bus.publish(Topic::Response, "observation", self.wire_data(), sender)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Normal,
    Abnormal,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    Normal,
    Delay,
    ExceptionCode,
    MalformedReply,
    Degraded,
    ConnectionRefused,
    ConnectionReset,
    Timeout,
    Crash,
}

impl Reason {
    pub const ALL: [Reason; 9] = [
        Reason::Normal,
        Reason::Delay,
        Reason::ExceptionCode,
        Reason::MalformedReply,
        Reason::Degraded,
        Reason::ConnectionRefused,
        Reason::ConnectionReset,
        Reason::Timeout,
        Reason::Crash,
    ];

    pub fn class(self) -> Class {
        match self {
            Reason::Normal => Class::Normal,
            Reason::Delay | Reason::ExceptionCode | Reason::MalformedReply => Class::Abnormal,
            _ => Class::Critical,
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reason::Normal => "normal",
            Reason::Delay => "delay",
            Reason::ExceptionCode => "exception code",
            Reason::MalformedReply => "malformed reply",
            Reason::Degraded => "degraded",
            Reason::ConnectionRefused => "connection-refused",
            Reason::ConnectionReset => "connection-reset",
            Reason::Timeout => "timeout",
            Reason::Crash => "crash",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseClass {
    pub class: Class,
    pub reason: Reason,
}

impl ResponseClass {
    fn of(reason: Reason) -> Self {
        ResponseClass { class: reason.class(), reason }
    }
}

/// Deterministic classification. Liveness and transport failures dominate;
/// replies are judged against the spec's reply schema.
pub fn classify_response(obs: &Observation, spec: &ProtocolSpec, delay_threshold_ms: u64) -> ResponseClass {
    let reason = match (&obs.outcome, obs.liveness_after) {
        (_, Liveness::Down) => Reason::Crash,
        (Outcome::Timeout, _) => Reason::Timeout,
        (Outcome::ConnectionReset, _) => Reason::ConnectionReset,
        (Outcome::ConnectionRefused, _) => Reason::ConnectionRefused,
        (Outcome::Reply { .. }, Liveness::Degraded) => Reason::Degraded,
        (Outcome::Reply { bytes }, Liveness::Alive) => classify_reply(bytes, spec, obs.response_time_ms, delay_threshold_ms),
    };
    ResponseClass::of(reason)
}

fn classify_reply(bytes: &[u8], spec: &ProtocolSpec, response_time_ms: u64, delay_threshold_ms: u64) -> Reason {
    let reply_spec = spec.reply.as_deref().unwrap_or(spec);
    let Ok(frame) = decode_frame(bytes, reply_spec) else {
        return Reason::MalformedReply;
    };
    if let Some(marker) = &reply_spec.exception {
        if frame.int(&marker.field).is_some_and(|v| v & marker.mask != 0) {
            return Reason::ExceptionCode;
        }
    }
    if !validate_frame(&frame, reply_spec).valid {
        return Reason::MalformedReply;
    }
    if response_time_ms > delay_threshold_ms {
        return Reason::Delay;
    }
    Reason::Normal
}

/// Decimal fixed point with four fractional digits. Inputs are rounded to
/// hundredths, so a product of two inputs is exact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fixed(pub i64);

impl Serialize for Fixed {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.to_f64())
    }
}

impl<'de> Deserialize<'de> for Fixed {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let x = f64::deserialize(d)?;
        Ok(Fixed((x * Fixed::SCALE as f64).round() as i64))
    }
}

impl Fixed {
    pub const ZERO: Fixed = Fixed(0);
    const SCALE: i64 = 10_000;

    pub fn from_hundredths(h: i64) -> Self {
        Fixed(h * 100)
    }

    /// Rounds to the nearest hundredth.
    pub fn from_f64(x: f64) -> Self {
        Fixed::from_hundredths((x * 100.0).round() as i64)
    }

    pub fn from_int(n: i64) -> Self {
        Fixed(n * Self::SCALE)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }

    pub fn ratio(self, other: Fixed) -> f64 {
        if other.0 == 0 {
            0.0
        } else {
            self.0 as f64 / other.0 as f64
        }
    }
}

impl Add for Fixed {
    type Output = Fixed;
    fn add(self, o: Fixed) -> Fixed {
        Fixed(self.0 + o.0)
    }
}

impl Mul for Fixed {
    type Output = Fixed;
    fn mul(self, o: Fixed) -> Fixed {
        Fixed((self.0 as i128 * o.0 as i128 / Fixed::SCALE as i128) as i64)
    }
}

impl fmt::Display for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        let frac = a % 10_000;
        if frac % 100 == 0 {
            write!(f, "{sign}{}.{:02}", a / 10_000, frac / 100)
        } else {
            write!(f, "{sign}{}.{:04}", a / 10_000, frac)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Weights {
    pub w1: Fixed,
    pub w2: Fixed,
    pub w3: Fixed,
}

impl Weights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Self {
        assert!(w1 >= 0.0 && w2 >= 0.0 && w3 >= 0.0, "weights are non-negative");
        Weights { w1: Fixed::from_f64(w1), w2: Fixed::from_f64(w2), w3: Fixed::from_f64(w3) }
    }
}

impl Default for Weights {
    fn default() -> Self {
        Weights::new(1.0, 1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityScore {
    pub e: Fixed,
    pub t: Fixed,
    pub r: Fixed,
    pub s: Fixed,
    pub weights: Weights,
}

/// `S = w1*E + w2*T + w3*R`.
pub fn weighted(e: Fixed, t: Fixed, r: Fixed, w: Weights) -> SeverityScore {
    SeverityScore { e, t, r, s: w.w1 * e + w.w2 * t + w.w3 * r, weights: w }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub weights: Weights,
    /// Anomaly-type score per reason.
    pub anomaly_scores: BTreeMap<Reason, f64>,
    pub timeout_score: f64,
    pub delay_score: f64,
    pub delay_threshold_ms: u64,
    pub window: usize,
    pub frequency_high: f64,
    pub stability_low: f64,
    pub damping: f64,
    pub priority_boost: f64,
    /// Boosted priority never exceeds base priority times this.
    pub priority_cap: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        let anomaly_scores = [
            (Reason::Crash, 10.0),
            (Reason::Timeout, 8.0),
            (Reason::ConnectionReset, 6.0),
            (Reason::ConnectionRefused, 6.0),
            (Reason::Degraded, 5.0),
            (Reason::ExceptionCode, 4.0),
            (Reason::MalformedReply, 4.0),
            (Reason::Delay, 3.0),
            (Reason::Normal, 0.0),
        ]
        .into_iter()
        .collect();
        FeedbackConfig {
            weights: Weights::default(),
            anomaly_scores,
            timeout_score: 8.0,
            delay_score: 3.0,
            delay_threshold_ms: 200,
            window: 200,
            frequency_high: 0.5,
            stability_low: 0.5,
            damping: 0.5,
            priority_boost: 2.0,
            priority_cap: 4.0,
        }
    }
}

impl FeedbackConfig {
    /// Largest attainable S: worst anomaly, worst time band, R = 10.
    pub fn s_max(&self) -> Fixed {
        let e = self.anomaly_scores.values().copied().fold(0.0, f64::max);
        let t = self.timeout_score.max(self.delay_score);
        weighted(Fixed::from_f64(e), Fixed::from_f64(t), Fixed::from_int(10), self.weights).s
    }
}

/// Severity components E, T, R and their weighted sum for one observation.
pub fn severity(obs: &Observation, cls: &ResponseClass, cfg: &FeedbackConfig) -> SeverityScore {
    let e = Fixed::from_f64(cfg.anomaly_scores.get(&cls.reason).copied().unwrap_or(0.0));
    let t = if obs.outcome == Outcome::Timeout {
        Fixed::from_f64(cfg.timeout_score)
    } else if obs.response_time_ms > cfg.delay_threshold_ms {
        Fixed::from_f64(cfg.delay_score)
    } else {
        Fixed::ZERO
    };
    let r = Fixed::from_f64((obs.resource_signal * 10.0).clamp(0.0, 10.0));
    weighted(e, t, r, cfg.weights)
}

/// Sliding window of (anomalous, target alive) pairs.
#[derive(Debug, Clone, Default)]
pub struct History {
    window: usize,
    items: VecDeque<(bool, bool)>,
}

impl History {
    pub fn new(window: usize) -> Self {
        History { window: window.max(1), items: VecDeque::new() }
    }

    pub fn push(&mut self, anomalous: bool, alive: bool) {
        if self.items.len() == self.window {
            self.items.pop_front();
        }
        self.items.push_back((anomalous, alive));
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn anomaly_frequency(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.iter().filter(|x| x.0).count() as f64 / self.items.len() as f64
    }

    /// Fraction of alive probes; 1 for an empty window.
    pub fn stability(&self) -> f64 {
        if self.items.is_empty() {
            return 1.0;
        }
        self.items.iter().filter(|x| x.1).count() as f64 / self.items.len() as f64
    }
}

/// Rate update from the score ratio, priority boost for `implicated` fields, then the damping
/// rule. `base` holds the spec's default priorities for the cap.
pub fn adjust_strategy(
    strategy: &MutationStrategy,
    score: &SeverityScore,
    s_max: Fixed,
    history: &History,
    implicated: &BTreeSet<String>,
    base: &BTreeMap<String, f64>,
    cfg: &FeedbackConfig,
) -> MutationStrategy {
    assert!(s_max.0 > 0, "s_max must be positive");
    let mut s = strategy.clone();
    let ratio = score.s.ratio(s_max);
    s.rho = (s.rho0 * (1.0 + s.beta * ratio)).clamp(s.rho_min, 1.0);
    s.feedback_score = ratio.clamp(0.0, 1.0);
    if score.s.0 > 0 {
        for f in implicated {
            let Some(&b) = base.get(f) else { continue };
            let cur = s.field_priorities.get(f).copied().unwrap_or(b);
            s.field_priorities.insert(f.clone(), (cur * cfg.priority_boost).min(b * cfg.priority_cap));
        }
    }
    if history.anomaly_frequency() > cfg.frequency_high && history.stability() < cfg.stability_low {
        s.rho = (s.rho * cfg.damping).clamp(s.rho_min, 1.0);
    }
    s
}

/// What the agent did with one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub class: ResponseClass,
    pub score: SeverityScore,
    pub strategy_changed: bool,
    pub anomaly_id: Option<String>,
}

#[derive(Debug)]
pub struct FeedbackAgent {
    pub agent_id: String,
    spec: ProtocolSpec,
    pub config: FeedbackConfig,
    pub strategy: MutationStrategy,
    base_priorities: BTreeMap<String, f64>,
    pub history: History,
    s_max: Fixed,
    /// case id -> (seed id, mutation records, function code), from the test_case topic.
    cases: HashMap<String, (String, Vec<MutationRecord>, Option<u64>)>,
    anomaly_seq: u64,
}

impl FeedbackAgent {
    pub fn new(spec: ProtocolSpec, strategy: MutationStrategy, config: FeedbackConfig) -> Self {
        let base_priorities = spec.fields.iter().map(|f| (f.name.clone(), f.priority)).collect();
        FeedbackAgent {
            agent_id: "feedback-0".into(),
            history: History::new(config.window),
            s_max: config.s_max(),
            spec,
            config,
            strategy,
            base_priorities,
            cases: HashMap::new(),
            anomaly_seq: 0,
        }
    }

    pub fn s_max(&self) -> Fixed {
        self.s_max
    }

    pub fn note_case(&mut self, data: &Value) {
        let (Some(id), Some(seed)) = (data["case_id"].as_str(), data["seed_id"].as_str()) else {
            return;
        };
        let records: Vec<MutationRecord> = serde_json::from_value(data["mutations"].clone()).unwrap_or_default();
        let fc = data["hex"]
            .as_str()
            .and_then(|h| hex::decode(h).ok())
            .and_then(|b| decode_frame(&b, &self.spec).ok())
            .and_then(|f| f.int("function_code"));
        self.cases.insert(id.to_string(), (seed.to_string(), records, fc));
    }

    fn next_anomaly_id(&mut self, store: &KnowledgeStore) -> String {
        loop {
            self.anomaly_seq += 1;
            let id = format!("anomaly-{:06}", self.anomaly_seq);
            if store.get(&id).is_none() {
                return id;
            }
        }
    }

    /// Classifies, scores and adjusts. A changed strategy is published on the
    /// bus; abnormal and critical observations are recorded in `store`.
    pub fn observe(
        &mut self,
        obs: &Observation,
        store: &mut KnowledgeStore,
        bus: &dyn Transport,
    ) -> Result<Assessment, KbError> {
        let class = classify_response(obs, &self.spec, self.config.delay_threshold_ms);
        let score = severity(obs, &class, &self.config);
        self.history.push(class.class != Class::Normal, obs.liveness_after == Liveness::Alive);
        let (seed_id, records, fc) = self.cases.remove(&obs.case_id).unwrap_or_default();
        let implicated: BTreeSet<String> = records.iter().flat_map(MutationRecord::touched).collect();
        let next = adjust_strategy(
            &self.strategy,
            &score,
            self.s_max,
            &self.history,
            &implicated,
            &self.base_priorities,
            &self.config,
        );
        let strategy_changed = next != self.strategy;
        if strategy_changed {
            self.strategy = next;
            if let Err(e) = bus.publish(Topic::Strategy, "strategy", self.strategy.wire_data(), &self.agent_id) {
                tracing::warn!(error = %e, "strategy publication failed");
            }
        }
        let anomaly_id = if class.class == Class::Normal {
            None
        } else {
            let id = self.next_anomaly_id(store);
            store.append(anomaly_entry(&id, &self.spec, obs, &class, &score, &seed_id, &records, fc))?;
            Some(id)
        };
        Ok(Assessment { class, score, strategy_changed, anomaly_id })
    }
}

#[allow(clippy::too_many_arguments)]
fn anomaly_entry(
    id: &str,
    spec: &ProtocolSpec,
    obs: &Observation,
    class: &ResponseClass,
    score: &SeverityScore,
    seed_id: &str,
    records: &[MutationRecord],
    fc: Option<u64>,
) -> RuleEntry {
    let reason = class.reason.to_string();
    let mut keywords: BTreeSet<String> = BTreeSet::new();
    keywords.insert("anomaly".into());
    keywords.insert(spec.protocol_id.clone());
    keywords.extend(reason.split(['-', ' ']).map(str::to_string));
    let mut touched = BTreeSet::new();
    for r in records {
        keywords.insert(r.kind().to_string());
        for f in r.touched() {
            touched.insert(f.clone());
            keywords.insert(f);
        }
        if let MutationRecord::Semantic { relation, .. } = r {
            keywords.insert(relation.clone());
        }
    }
    if let Some(fc) = fc {
        keywords.insert(format!("fc{fc:02}"));
        keywords.insert(format!("{fc:02}"));
    }
    let touched: Vec<String> = touched.into_iter().collect();
    RuleEntry {
        id: id.to_string(),
        protocol_id: spec.protocol_id.clone(),
        kind: EntryKind::AnomalyRecord,
        title: format!("{} on case {}", reason, obs.case_id),
        body: format!(
            "class {:?}, S={} (E={}, T={}, R={}); seed {}; mutated fields: {}; response time {} ms; target {:?} afterwards",
            class.class,
            score.s,
            score.e,
            score.t,
            score.r,
            if seed_id.is_empty() { "unknown" } else { seed_id },
            if touched.is_empty() { "none".to_string() } else { touched.join(", ") },
            obs.response_time_ms,
            obs.liveness_after,
        ),
        keywords: keywords.into_iter().collect(),
        source: format!("case {}", obs.case_id),
    }
}
