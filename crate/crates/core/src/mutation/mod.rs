//! Test-case generation: field, structural and semantic mutation of seeds,
//! with density driven by feedback, behind a pluggable backend.

mod backend;
mod ops;
mod prompt;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bus::{Ack, BusError, Topic, Transport};
use crate::protocol::ProtocolSpec;
use crate::seed::Seed;

pub use backend::{Backend, RemoteBackend, RemoteConfig};
pub use ops::{mutate_field, mutate_semantic, mutate_structure, sample_delta, DeltaMix, Mutated};
pub use prompt::{build_prompt, Prompt};

pub const DEFAULT_RHO_MIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutationKind {
    Field,
    Structural,
    Semantic,
}

impl MutationKind {
    pub const ALL: [MutationKind; 3] = [MutationKind::Field, MutationKind::Structural, MutationKind::Semantic];

    pub fn as_str(self) -> &'static str {
        match self {
            MutationKind::Field => "field",
            MutationKind::Structural => "structural",
            MutationKind::Semantic => "semantic",
        }
    }
}

impl fmt::Display for MutationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionWeights {
    pub field: f64,
    pub structural: f64,
    pub semantic: f64,
}

impl Default for DirectionWeights {
    fn default() -> Self {
        DirectionWeights { field: 0.7, structural: 0.15, semantic: 0.15 }
    }
}

impl DirectionWeights {
    pub fn get(&self, kind: MutationKind) -> f64 {
        match kind {
            MutationKind::Field => self.field,
            MutationKind::Structural => self.structural,
            MutationKind::Semantic => self.semantic,
        }
    }

    pub fn total(&self) -> f64 {
        self.field + self.structural + self.semantic
    }

    pub fn is_valid(&self) -> bool {
        MutationKind::ALL.iter().all(|&k| self.get(k) >= 0.0 && self.get(k).is_finite()) && self.total() > 0.0
    }

    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> MutationKind {
        let mut x = rng.gen::<f64>() * self.total();
        for k in MutationKind::ALL {
            let w = self.get(k);
            if x < w {
                return k;
            }
            x -= w;
        }
        // rounding left a sliver: last kind with weight
        *MutationKind::ALL.iter().rev().find(|&&k| self.get(k) > 0.0).expect("positive total")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationStrategy {
    pub rho0: f64,
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rho_min: f64,
    pub field_priorities: BTreeMap<String, f64>,
    pub direction_weights: DirectionWeights,
    pub feedback_score: f64,
}

impl MutationStrategy {
    /// Initial strategy with the spec's default field priorities.
    pub fn for_spec(spec: &ProtocolSpec, rho0: f64, alpha: f64, beta: f64) -> Self {
        MutationStrategy {
            rho0,
            rho: rho0.clamp(DEFAULT_RHO_MIN, 1.0),
            alpha,
            beta,
            rho_min: DEFAULT_RHO_MIN,
            field_priorities: spec.fields.iter().map(|f| (f.name.clone(), f.priority)).collect(),
            direction_weights: DirectionWeights::default(),
            feedback_score: 0.0,
        }
    }

    pub fn priority(&self, field: &str) -> f64 {
        self.field_priorities.get(field).copied().unwrap_or(0.0)
    }

    /// The `data` object of a strategy message.
    pub fn wire_data(&self) -> Value {
        json!({
            "rho": self.rho,
            "field_priorities": self.field_priorities,
            "direction_weights": self.direction_weights,
            "feedback_score": self.feedback_score,
        })
    }

    /// Applies a strategy message: priorities and weights are taken over, the
    /// density is recomputed from the score and capped by the published rho.
    pub fn apply_message(&mut self, data: &Value) -> Result<(), String> {
        let score = data["feedback_score"].as_f64().ok_or("feedback_score missing")?;
        let published_rho = data["rho"].as_f64().ok_or("rho missing")?;
        let priorities: BTreeMap<String, f64> =
            serde_json::from_value(data["field_priorities"].clone()).map_err(|e| format!("bad field_priorities: {e}"))?;
        let weights: DirectionWeights =
            serde_json::from_value(data["direction_weights"].clone()).map_err(|e| format!("bad direction_weights: {e}"))?;
        if !weights.is_valid() {
            return Err("direction weights must be non-negative with a positive sum".into());
        }
        if priorities.values().any(|p| !p.is_finite() || *p < 0.0) {
            return Err("field priorities must be non-negative".into());
        }
        let next = update_density(self, score.clamp(0.0, 1.0));
        self.feedback_score = next.feedback_score;
        self.rho = next.rho.min(published_rho).clamp(self.rho_min, 1.0);
        self.field_priorities = priorities;
        self.direction_weights = weights;
        Ok(())
    }
}

/// `rho = clamp(rho0 * (1 + alpha * score), rho_min, 1)`.
pub fn density(rho0: f64, alpha: f64, score: f64, rho_min: f64) -> f64 {
    (rho0 * (1.0 + alpha * score)).clamp(rho_min, 1.0)
}

pub fn update_density(strategy: &MutationStrategy, feedback_score: f64) -> MutationStrategy {
    assert!((0.0..=1.0).contains(&feedback_score), "feedback score must lie in [0, 1]");
    let mut s = strategy.clone();
    s.feedback_score = feedback_score;
    s.rho = density(s.rho0, s.alpha, feedback_score, s.rho_min);
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertedBlob {
    pub name: String,
    /// Field the blob follows, or `end`.
    pub at: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MutationRecord {
    /// `v_prime = (v + delta) mod 2^width`.
    Field { field: String, width: u32, v: u64, delta: i64, v_prime: u64 },
    Structural { inserted: Vec<InsertedBlob>, deleted: Vec<String> },
    Semantic { relation: String, fields: Vec<String>, description: String },
    /// Baseline generator output with no relation to a seed.
    Random { len: usize },
}

impl MutationRecord {
    pub fn kind(&self) -> &'static str {
        match self {
            MutationRecord::Field { .. } => "field",
            MutationRecord::Structural { .. } => "structural",
            MutationRecord::Semantic { .. } => "semantic",
            MutationRecord::Random { .. } => "random",
        }
    }

    /// Declared fields this record changed.
    pub fn touched(&self) -> Vec<String> {
        match self {
            MutationRecord::Field { field, .. } => vec![field.clone()],
            MutationRecord::Structural { deleted, .. } => deleted.clone(),
            MutationRecord::Semantic { fields, .. } => fields.clone(),
            MutationRecord::Random { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub case_id: String,
    pub seed_id: String,
    pub protocol_id: String,
    pub mutations: Vec<MutationRecord>,
    #[serde(with = "crate::protocol::hex_bytes")]
    pub bytes: Vec<u8>,
    pub strategy_snapshot: MutationStrategy,
    /// Produced by the deterministic engine because the configured backend failed.
    #[serde(default)]
    pub fallback: bool,
}

impl TestCase {
    pub fn wire_data(&self) -> Value {
        json!({
            "case_id": self.case_id,
            "seed_id": self.seed_id,
            "protocol_id": self.protocol_id,
            "mutations": self.mutations,
            "hex": hex::encode(&self.bytes),
        })
    }

    pub fn document(&self) -> Value {
        json!({ "event": "test_case", "data": self.wire_data() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MutationError {
    #[error("seed has no mutable fields")]
    NoMutableFields,
    #[error("spec declares no splice points and the seed has no deletable fields")]
    NoMutableStructure,
    #[error("no semantic relation applies to the seed")]
    NoSemanticRelations,
    #[error("no anomaly for the applicable relations passed the single-violation check")]
    SemanticCheckFailed,
    #[error("seed does not fit the spec: {0}")]
    BadSeed(String),
    #[error("generation backend unavailable: {0}")]
    BackendUnavailable(String),
}

/// Mutation engine parameters beyond the strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub delta: DeltaMix,
    /// Maximum number of blobs spliced by one structural mutation.
    pub max_inserts: usize,
    pub max_blob_len: usize,
    /// Attempts per semantic mutation before falling back to a field mutation.
    pub semantic_attempts: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { delta: DeltaMix::default(), max_inserts: 2, max_blob_len: 8, semantic_attempts: 24 }
    }
}

/// One mutation of the given kind; `Err` is returned only for preconditions
/// the seed cannot meet.
pub fn mutate(
    kind: MutationKind,
    seed: &Seed,
    spec: &ProtocolSpec,
    strategy: &MutationStrategy,
    cfg: &EngineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Mutated, MutationError> {
    let frame = seed.frame(spec).map_err(MutationError::BadSeed)?;
    match kind {
        MutationKind::Field => mutate_field(&frame, spec, strategy, &cfg.delta, rng),
        MutationKind::Structural => mutate_structure(&frame, spec, cfg, rng),
        MutationKind::Semantic => mutate_semantic(&frame, spec, cfg, rng),
    }
}

/// Mutation agent instance: keeps a seed corpus from the bus, applies strategy
/// updates between batches and turns batch tasks into published test cases.
#[derive(Debug)]
pub struct MutationAgent {
    pub agent_id: String,
    pub instance: u32,
    spec: ProtocolSpec,
    pub strategy: MutationStrategy,
    pub config: EngineConfig,
    pub backend: Backend,
    rng: ChaCha8Rng,
    pub corpus: Vec<Seed>,
    pending_strategy: Option<Value>,
    counter: u64,
    /// Remote cases dropped because they failed to decode.
    pub dropped: u64,
}

impl MutationAgent {
    pub fn new(instance: u32, spec: ProtocolSpec, strategy: MutationStrategy, backend: Backend, rng: ChaCha8Rng) -> Self {
        MutationAgent {
            agent_id: format!("mutation-{instance}"),
            instance,
            spec,
            strategy,
            config: EngineConfig::default(),
            backend,
            rng,
            corpus: Vec::new(),
            pending_strategy: None,
            counter: 0,
            dropped: 0,
        }
    }

    pub fn spec(&self) -> &ProtocolSpec {
        &self.spec
    }

    pub fn add_seed(&mut self, data: &Value) -> Result<(), String> {
        if data["protocol_id"].as_str() != Some(self.spec.protocol_id.as_str()) {
            return Ok(());
        }
        let seed = Seed::from_wire(data, &self.spec)?;
        if !self.corpus.iter().any(|s| s.seed_id == seed.seed_id) {
            self.corpus.push(seed);
        }
        Ok(())
    }

    /// Stores a strategy message; it takes effect at the start of the next batch.
    pub fn queue_strategy(&mut self, data: Value) {
        self.pending_strategy = Some(data);
    }

    fn next_case_id(&mut self) -> String {
        self.counter += 1;
        format!("m{}-{:06}", self.instance, self.counter)
    }

    /// Generates `n` cases from corpus entry `seed_index` (modulo corpus size).
    pub fn run_batch(&mut self, seed_index: usize, n: usize) -> Vec<TestCase> {
        if let Some(data) = self.pending_strategy.take() {
            if let Err(e) = self.strategy.apply_message(&data) {
                tracing::warn!(agent = %self.agent_id, error = %e, "strategy message ignored");
            }
        }
        if self.corpus.is_empty() || n == 0 {
            return Vec::new();
        }
        let seed = self.corpus[seed_index % self.corpus.len()].clone();
        let strategy = self.strategy.clone();
        let produced = self.backend.generate_batch(&seed, &self.spec, &strategy, &self.config, n, &mut self.rng);
        self.dropped += produced.dropped;
        produced
            .cases
            .into_iter()
            .map(|(mutations, bytes, fallback)| TestCase {
                case_id: self.next_case_id(),
                seed_id: seed.seed_id.clone(),
                protocol_id: self.spec.protocol_id.clone(),
                mutations,
                bytes,
                strategy_snapshot: strategy.clone(),
                fallback,
            })
            .collect()
    }

    pub fn publish(&self, case: &TestCase, bus: &dyn Transport) -> Result<Ack, BusError> {
        bus.publish(Topic::TestCase, "test_case", case.wire_data(), &self.agent_id)
    }
}

/// Deterministic engine batch: kinds drawn per direction weights, unmet
/// preconditions fall back to a field mutation.
pub fn generate_batch(
    seed: &Seed,
    spec: &ProtocolSpec,
    strategy: &MutationStrategy,
    cfg: &EngineConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<MutationRecord>, Vec<u8>)> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let kind = strategy.direction_weights.pick(rng);
        let m = mutate(kind, seed, spec, strategy, cfg, rng)
            .or_else(|_| mutate(MutationKind::Field, seed, spec, strategy, cfg, rng));
        match m {
            Ok(m) => out.push((m.records, m.bytes)),
            Err(e) => {
                tracing::warn!(seed = %seed.seed_id, error = %e, "seed cannot be mutated");
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn strategy() -> MutationStrategy {
        MutationStrategy {
            rho0: 0.1,
            rho: 0.1,
            alpha: 0.5,
            beta: 1.0,
            rho_min: DEFAULT_RHO_MIN,
            field_priorities: BTreeMap::new(),
            direction_weights: DirectionWeights::default(),
            feedback_score: 0.0,
        }
    }

    #[test]
    fn density_table() {
        assert!((density(0.1, 0.5, 1.0, 0.01) - 0.15).abs() < 1e-12);
        assert_eq!(density(0.1, 0.5, 0.0, 0.01), 0.1);
        assert_eq!(density(0.8, 1.0, 0.5, 0.01), 1.0);
        let s = update_density(&strategy(), 1.0);
        assert!((s.rho - 0.15).abs() < 1e-12);
    }

    #[test]
    fn degenerate_weights_pick_one_kind() {
        let w = DirectionWeights { field: 1.0, structural: 0.0, semantic: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| w.pick(&mut rng) == MutationKind::Field));
    }

    #[test]
    fn strategy_message_caps_density() {
        let mut s = strategy();
        let mut msg = s.wire_data();
        msg["feedback_score"] = json!(1.0);
        msg["rho"] = json!(0.12);
        s.apply_message(&msg).unwrap();
        assert!((s.rho - 0.12).abs() < 1e-12);
        msg["rho"] = json!(0.9);
        s.apply_message(&msg).unwrap();
        assert!((s.rho - 0.15).abs() < 1e-12);
        msg["direction_weights"] = json!({"field": 0.0, "structural": 0.0, "semantic": 0.0});
        assert!(s.apply_message(&msg).is_err());
    }
}
