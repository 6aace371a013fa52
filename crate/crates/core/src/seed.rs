//! Seed extraction: captured request bytes are taken through identify, decode,
//! per-field validation and assembly, consulting the knowledge base at each
//! step. Anything that fails a stage is quarantined with the stage and reason.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bus::{Ack, BusError, Topic, Transport};
use crate::capture::RawCapture;
use crate::kb::Retriever;
use crate::protocol::{
    combos_of_frame, decode_frame, encode_frame, enumerate_combos, layout_path, validate_frame, Combo, FieldValue,
    Frame, ProtocolSpec, Synthesizer, ValidationReport,
};

pub const SYNTHETIC: &str = "synthetic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub seed_id: String,
    pub protocol_id: String,
    pub fields: BTreeMap<String, FieldValue>,
    pub provenance: String,
    pub validation: ValidationReport,
    /// Knowledge-base entries consulted while extracting, in stage order.
    #[serde(default)]
    pub rules: Vec<String>,
}

impl Seed {
    /// The `data` object of the seed wire document.
    pub fn wire_data(&self) -> Value {
        json!({
            "seed_id": self.seed_id,
            "protocol_id": self.protocol_id,
            "fields": self.fields,
            "provenance": self.provenance,
        })
    }

    pub fn document(&self) -> Value {
        json!({ "event": "seed", "data": self.wire_data() })
    }

    /// Rebuilds a seed from a bus message body. The validation report is recomputed against `spec`.
    pub fn from_wire(data: &Value, spec: &ProtocolSpec) -> Result<Seed, String> {
        let fields: BTreeMap<String, FieldValue> =
            serde_json::from_value(data["fields"].clone()).map_err(|e| format!("bad seed fields: {e}"))?;
        let mut seed = Seed {
            seed_id: data["seed_id"].as_str().ok_or("seed_id missing")?.to_string(),
            protocol_id: data["protocol_id"].as_str().ok_or("protocol_id missing")?.to_string(),
            fields,
            provenance: data["provenance"].as_str().unwrap_or_default().to_string(),
            validation: ValidationReport::default(),
            rules: Vec::new(),
        };
        seed.validation = validate_frame(&seed.frame(spec)?, spec);
        Ok(seed)
    }

    /// The seed as an encodable frame of `spec`.
    pub fn frame(&self, spec: &ProtocolSpec) -> Result<Frame, String> {
        let path = layout_path(spec, &self.fields)?;
        Ok(Frame { spec_id: spec.protocol_id.clone(), values: self.fields.clone(), path, ..Default::default() })
    }
}

/// `s-` plus the first 16 hex digits of SHA-256 over the canonical field map.
pub fn seed_id(protocol_id: &str, fields: &BTreeMap<String, FieldValue>) -> String {
    let canonical = serde_json::to_string(&json!({ "protocol_id": protocol_id, "fields": fields }))
        .expect("field maps serialize");
    let digest = Sha256::digest(canonical.as_bytes());
    format!("s-{}", &hex::encode(digest)[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Identify,
    Decode,
    Validate,
    Assemble,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Identify => "identify",
            Stage::Decode => "decode",
            Stage::Validate => "validate",
            Stage::Assemble => "assemble",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub reference: String,
    pub stage: Stage,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(with = "crate::protocol::hex_bytes")]
    pub payload: Vec<u8>,
}

/// How many rule hits each stage query asks for.
const RULES_PER_QUERY: usize = 1;

fn identify_query(spec: &ProtocolSpec, port: u16) -> String {
    format!("protocol identify {} port {port}", spec.protocol_id)
}

/// Rule query used when validating `field` with value `value`.
pub fn field_query(spec: &ProtocolSpec, field: &str, value: &FieldValue) -> String {
    match (field, value) {
        ("function_code", FieldValue::Int(v)) => format!("protocol rules {} function_code {v:02}", spec.protocol_id),
        _ => format!("field constraint {} {field}", spec.protocol_id),
    }
}

/// The staged extraction pipeline. Pure: the same capture and store give the
/// same seed or the same quarantine record.
pub fn extract_seed(
    capture: &RawCapture,
    specs: &[ProtocolSpec],
    store: &dyn Retriever,
) -> Result<Seed, QuarantineRecord> {
    extract_bytes(&capture.payload, Some(capture.dst.port()), &capture.reference, specs, store)
}

fn extract_bytes(
    payload: &[u8],
    port: Option<u16>,
    reference: &str,
    specs: &[ProtocolSpec],
    store: &dyn Retriever,
) -> Result<Seed, QuarantineRecord> {
    let quarantine = |stage, reason: String, field: Option<String>| QuarantineRecord {
        reference: reference.to_string(),
        stage,
        reason,
        field,
        payload: payload.to_vec(),
    };
    if payload.is_empty() {
        return Err(quarantine(Stage::Identify, "empty payload".into(), None));
    }
    let mut rules = Vec::new();

    // identify: the port decides; magic fields only break ties between specs on one port
    let candidates: Vec<&ProtocolSpec> =
        specs.iter().filter(|s| port.is_none_or(|p| s.default_port == p)).collect();
    let spec = match candidates.as_slice() {
        [] => return Err(quarantine(Stage::Identify, format!("no protocol spec for port {}", port.unwrap_or(0)), None)),
        [one] => *one,
        many => match many.iter().find(|s| decode_frame(payload, s).is_ok()) {
            Some(s) => *s,
            None => return Err(quarantine(Stage::Identify, "magic bytes match no candidate protocol".into(), None)),
        },
    };
    let port_used = port.unwrap_or(spec.default_port);
    rules.extend(store.retrieve(&identify_query(spec, port_used), RULES_PER_QUERY).into_iter().map(|r| r.entry.id));

    let frame = decode_frame(payload, spec).map_err(|e| quarantine(Stage::Decode, e.to_string(), None))?;

    // per-field validation in declaration order; the first failing field ends the pipeline
    let report = validate_frame(&frame, spec);
    for fd in &spec.fields {
        let Some(value) = frame.values.get(&fd.name) else {
            continue;
        };
        rules.extend(store.retrieve(&field_query(spec, &fd.name, value), RULES_PER_QUERY).into_iter().map(|r| r.entry.id));
        if let Some(v) = report.violations.iter().find(|v| v.field == fd.name) {
            return Err(quarantine(Stage::Validate, format!("{}: {}", v.field, v.constraint), Some(fd.name.clone())));
        }
    }
    if let Some(v) = report.violations.first() {
        return Err(quarantine(Stage::Validate, format!("{}: {}", v.field, v.constraint), Some(v.field.clone())));
    }

    // assemble, and check the seed survives a round trip
    let fields = frame.values.clone();
    let rebuilt = Frame { spec_id: spec.protocol_id.clone(), values: fields.clone(), path: frame.path.clone(), ..Default::default() };
    let bytes = encode_frame(&rebuilt, spec).map_err(|e| quarantine(Stage::Assemble, e.to_string(), None))?;
    if bytes != payload {
        return Err(quarantine(Stage::Assemble, "re-encoding does not reproduce the captured bytes".into(), None));
    }
    Ok(Seed {
        seed_id: seed_id(&spec.protocol_id, &fields),
        protocol_id: spec.protocol_id.clone(),
        fields,
        provenance: reference.to_string(),
        validation: report,
        rules,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeedOutcome {
    Published(Seed),
    Duplicate(String),
    Quarantined(QuarantineRecord),
}

/// Sequential seed agent: extract, dedup over the whole campaign, emit.
#[derive(Debug)]
pub struct SeedAgent {
    pub agent_id: String,
    specs: Vec<ProtocolSpec>,
    seen: BTreeSet<String>,
    pub corpus: Vec<Seed>,
    pub quarantine: Vec<QuarantineRecord>,
    pub duplicates: usize,
}

impl SeedAgent {
    pub fn new(agent_id: &str, specs: Vec<ProtocolSpec>) -> Self {
        SeedAgent {
            agent_id: agent_id.to_string(),
            specs,
            seen: BTreeSet::new(),
            corpus: Vec::new(),
            quarantine: Vec::new(),
            duplicates: 0,
        }
    }

    pub fn specs(&self) -> &[ProtocolSpec] {
        &self.specs
    }

    pub fn process(&mut self, capture: &RawCapture, store: &dyn Retriever) -> SeedOutcome {
        let res = extract_seed(capture, &self.specs, store);
        self.admit(res)
    }

    fn admit(&mut self, res: Result<Seed, QuarantineRecord>) -> SeedOutcome {
        match res {
            Err(q) => {
                tracing::debug!(reference = %q.reference, stage = %q.stage, reason = %q.reason, "capture quarantined");
                self.quarantine.push(q.clone());
                SeedOutcome::Quarantined(q)
            }
            Ok(seed) if !self.seen.insert(seed.seed_id.clone()) => {
                self.duplicates += 1;
                SeedOutcome::Duplicate(seed.seed_id)
            }
            Ok(seed) => {
                self.corpus.push(seed.clone());
                SeedOutcome::Published(seed)
            }
        }
    }

    /// Publishes a seed on the `seed` topic. A bus that is down buffers the message.
    pub fn emit(&self, seed: &Seed, bus: &dyn Transport) -> Result<Ack, BusError> {
        assert!(seed.validation.valid, "only validated seeds are published");
        bus.publish(Topic::Seed, "seed", seed.wire_data(), &self.agent_id)
    }

    /// Combos of `spec` not yet present in the corpus.
    pub fn uncovered(&self, spec: &ProtocolSpec) -> Vec<Combo> {
        let covered: BTreeSet<Combo> = self
            .corpus
            .iter()
            .filter(|s| s.protocol_id == spec.protocol_id)
            .filter_map(|s| s.frame(spec).ok())
            .flat_map(|f| combos_of_frame(spec, &f))
            .collect();
        enumerate_combos(spec).into_iter().filter(|c| !covered.contains(c)).collect()
    }

    /// Synthetic augmentation: for every combo the corpus misses, synthesize a
    /// frame containing it and run it through the same pipeline. Unreachable
    /// combos are skipped. Returns the newly admitted seeds.
    pub fn augment<R: Rng + ?Sized>(&mut self, spec_id: &str, store: &dyn Retriever, rng: &mut R) -> Vec<Seed> {
        let Some(spec) = self.specs.iter().find(|s| s.protocol_id == spec_id).cloned() else {
            return Vec::new();
        };
        let synth = Synthesizer::new(&spec);
        let mut added = Vec::new();
        for combo in self.uncovered(&spec) {
            let Some(frame) = synth.frame_with(rng, &combo) else {
                continue;
            };
            let Ok(bytes) = encode_frame(&frame, &spec) else {
                continue;
            };
            let res = extract_bytes(&bytes, Some(spec.default_port), SYNTHETIC, std::slice::from_ref(&spec), store);
            if let SeedOutcome::Published(s) = self.admit(res) {
                added.push(s);
            }
        }
        added
    }

    /// Adds `n` synthetic seeds drawn without a combo target.
    pub fn synthesize<R: Rng + ?Sized>(&mut self, spec_id: &str, n: usize, store: &dyn Retriever, rng: &mut R) -> Vec<Seed> {
        let Some(spec) = self.specs.iter().find(|s| s.protocol_id == spec_id).cloned() else {
            return Vec::new();
        };
        let synth = Synthesizer::new(&spec);
        let mut added = Vec::new();
        for _ in 0..n {
            let Some(bytes) = synth.frame(rng).and_then(|f| encode_frame(&f, &spec).ok()) else {
                continue;
            };
            let res = extract_bytes(&bytes, Some(spec.default_port), SYNTHETIC, std::slice::from_ref(&spec), store);
            if let SeedOutcome::Published(s) = self.admit(res) {
                added.push(s);
            }
        }
        added
    }
}
