//! Protocol model: schema types, the spec-file loader, and the byte-level
//! codec and validator shared by every agent.

mod codec;
mod combos;
mod parser;
mod schema;
mod synth;
mod validate;
mod valueset;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use codec::{decode_frame, encode_frame, encode_frame_with, layout_path, DecodeError, EncodeError, EncodeMode, Encoded};
pub use combos::{combo_of, combos_of_frame, enumerate_combos, Combo};
pub use parser::{load_spec, parse_spec, SpecError};
pub use schema::{
    condition_holds, width_mask, Condition, CountSource, Domain, Endian, EqualRhs, ExceptionMarker, FieldDescriptor,
    FieldKind, ProtocolSpec, Relation, RelationKind, Restriction, Segment, Selector, SpanEnd, SplicePoint, ValueClass,
};
pub use synth::Synthesizer;
pub use validate::{validate_frame, ValidationReport, Violation};
pub use valueset::{parse_int, ValueSet};

/// A concrete field value. Integers serialize as JSON numbers, byte strings as lowercase hex.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FieldValue {
    Int(u64),
    Bytes(Vec<u8>),
}

impl FieldValue {
    pub fn as_int(&self) -> Option<u64> {
        match self {
            FieldValue::Int(v) => Some(*v),
            FieldValue::Bytes(_) => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            FieldValue::Bytes(b) => Some(b),
            FieldValue::Int(_) => None,
        }
    }

    /// Value for integers, byte length for byte strings. This is the key value classes are matched on.
    pub fn class_key(&self) -> u64 {
        match self {
            FieldValue::Int(v) => *v,
            FieldValue::Bytes(b) => b.len() as u64,
        }
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Int(v) => write!(f, "{v}"),
            FieldValue::Bytes(b) => write!(f, "0x{}", hex::encode(b)),
        }
    }
}

impl Serialize for FieldValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            FieldValue::Int(v) => s.serialize_u64(*v),
            FieldValue::Bytes(b) => s.serialize_str(&hex::encode(b)),
        }
    }
}

impl<'de> Deserialize<'de> for FieldValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(u64),
            Hex(String),
        }
        match Repr::deserialize(d)? {
            Repr::Int(v) => Ok(FieldValue::Int(v)),
            Repr::Hex(h) => hex::decode(&h)
                .map(FieldValue::Bytes)
                .map_err(|e| serde::de::Error::custom(format!("bad hex `{h}`: {e}"))),
        }
    }
}

/// Opaque bytes spliced into the stream at a declared splice point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Insertion {
    pub name: String,
    pub at: SplicePoint,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub spec_id: String,
    pub values: BTreeMap<String, FieldValue>,
    /// Layout order of the fields. Empty means "derive from the segment tree".
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub path: Vec<String>,
    /// Length fields whose value must be emitted verbatim instead of recomputed.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub pinned: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inserted: Vec<Insertion>,
    /// Fields dropped from the byte stream.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub deleted: BTreeSet<String>,
    /// Bytes left over after the layout was consumed.
    #[serde(default, skip_serializing_if = "Vec::is_empty", with = "hex_bytes")]
    pub trailing: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_hex_bytes")]
    pub raw: Option<Vec<u8>>,
}

impl Frame {
    pub fn new(spec_id: impl Into<String>) -> Self {
        Frame { spec_id: spec_id.into(), ..Default::default() }
    }

    pub fn with(mut self, name: &str, value: FieldValue) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn int(&self, name: &str) -> Option<u64> {
        self.values.get(name).and_then(FieldValue::as_int)
    }

    pub fn set_int(&mut self, name: &str, v: u64) {
        self.values.insert(name.to_string(), FieldValue::Int(v));
    }
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod opt_hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match b {
            Some(b) => s.serialize_some(&hex::encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let s = Option::<String>::deserialize(d)?;
        s.map(|s| hex::decode(&s).map_err(serde::de::Error::custom)).transpose()
    }
}
