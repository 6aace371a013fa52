//! Declarative protocol schema: fields, their domains and value classes, the
//! segment tree that fixes wire layout, and the inter-field rules checked by
//! validation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::valueset::ValueSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endian {
    Big,
    Little,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    /// Unsigned integer, byte aligned, `width_bits` in {8, 16, 24, 32, 40, 48, 56, 64}.
    Int { width_bits: u32 },
    /// Opaque bytes. `None` means "rest of frame" and is only legal at the end of a leaf segment.
    Bytes { fixed_len: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Enum(ValueSet),
    Range(ValueSet),
    /// A length field. The span it measures is given by `length` relations; the
    /// set here bounds the value and is what the value classes partition.
    LengthOf(ValueSet),
    /// Opaque payload; the set bounds the byte length.
    Opaque(ValueSet),
}

impl Domain {
    /// The set the value classes partition (values for integer domains, byte lengths for opaque).
    pub fn universe(&self) -> &ValueSet {
        match self {
            Domain::Enum(s) | Domain::Range(s) | Domain::LengthOf(s) | Domain::Opaque(s) => s,
        }
    }

    pub fn is_length(&self) -> bool {
        matches!(self, Domain::LengthOf(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueClass {
    pub name: String,
    pub set: ValueSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub name: String,
    pub kind: FieldKind,
    pub endian: Endian,
    pub domain: Domain,
    pub mandatory: bool,
    /// Default mutation priority; a strategy may override it per campaign.
    pub priority: f64,
    pub value_classes: Vec<ValueClass>,
    /// Absolute byte offset when every field before it on its first layout path is fixed width.
    pub offset: Option<usize>,
}

impl FieldDescriptor {
    pub fn width_bits(&self) -> Option<u32> {
        match self.kind {
            FieldKind::Int { width_bits } => Some(width_bits),
            FieldKind::Bytes { .. } => None,
        }
    }

    pub fn is_int(&self) -> bool {
        matches!(self.kind, FieldKind::Int { .. })
    }

    /// Largest value representable in the field width.
    pub fn max_value(&self) -> Option<u64> {
        self.width_bits().map(width_mask)
    }

    /// Name of the value class containing `key` (a value, or a byte length for opaque fields).
    pub fn class_of(&self, key: u64) -> Option<&str> {
        self.value_classes
            .iter()
            .find(|c| c.set.contains(key))
            .map(|c| c.name.as_str())
    }
}

pub fn width_mask(width_bits: u32) -> u64 {
    if width_bits >= 64 {
        u64::MAX
    } else {
        (1u64 << width_bits) - 1
    }
}

/// Condition `field ∈ set`, used for variant selection and to scope rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub field: String,
    pub set: ValueSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selector {
    Root,
    When(Condition),
    Otherwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub parent: Option<String>,
    pub selector: Selector,
    pub fields: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanEnd {
    Field(String),
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountSource {
    Field(String),
    /// Byte length of an opaque field.
    LenOf(String),
}

impl CountSource {
    pub fn field(&self) -> &str {
        match self {
            CountSource::Field(f) | CountSource::LenOf(f) => f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EqualRhs {
    Field(String),
    Const(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationKind {
    /// `target` equals the byte length of the fields from `from` to `to`, inclusive, in layout order.
    Length { target: String, from: String, to: SpanEnd },
    /// `target = ceil(source * num / den)`.
    Count { target: String, source: CountSource, num: u64, den: u64 },
    /// `target` equals another field or a constant.
    Equal { target: String, rhs: EqualRhs },
    /// `Σ operands <= bound`.
    Sum { operands: Vec<String>, bound: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub kind: RelationKind,
    pub when: Option<Condition>,
}

impl Relation {
    /// The field a violation of this relation is reported against.
    pub fn target(&self) -> &str {
        match &self.kind {
            RelationKind::Length { target, .. }
            | RelationKind::Count { target, .. }
            | RelationKind::Equal { target, .. } => target,
            RelationKind::Sum { operands, .. } => &operands[0],
        }
    }

    /// Every field name the relation mentions.
    pub fn fields(&self) -> Vec<&str> {
        let mut out: Vec<&str> = match &self.kind {
            RelationKind::Length { target, from, to } => {
                let mut v = vec![target.as_str(), from.as_str()];
                if let SpanEnd::Field(f) = to {
                    v.push(f);
                }
                v
            }
            RelationKind::Count { target, source, .. } => vec![target, source.field()],
            RelationKind::Equal { target, rhs } => match rhs {
                EqualRhs::Field(f) => vec![target.as_str(), f.as_str()],
                EqualRhs::Const(_) => vec![target.as_str()],
            },
            RelationKind::Sum { operands, .. } => operands.iter().map(String::as_str).collect(),
        };
        if let Some(c) = &self.when {
            out.push(&c.field);
        }
        out
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            RelationKind::Length { .. } => "length",
            RelationKind::Count { .. } => "count",
            RelationKind::Equal { .. } => "equal",
            RelationKind::Sum { .. } => "sum",
        }
    }
}

/// Extra domain restriction applying only when `when` holds (for example per function code).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Restriction {
    pub field: String,
    pub set: ValueSet,
    pub when: Option<Condition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplicePoint {
    After(String),
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExceptionMarker {
    pub field: String,
    pub mask: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub protocol_id: String,
    pub default_port: u16,
    pub fields: Vec<FieldDescriptor>,
    pub segments: Vec<Segment>,
    pub relations: Vec<Relation>,
    pub restrictions: Vec<Restriction>,
    pub splice_points: Vec<SplicePoint>,
    /// Fields whose value must sit in their enumerated domain for decode to accept the frame.
    pub magic: Vec<String>,
    /// Canonical benign requests used by liveness probes.
    pub probes: Vec<Vec<u8>>,
    pub exception: Option<ExceptionMarker>,
    /// Schema for the target's replies, when declared.
    pub reply: Option<Box<ProtocolSpec>>,
    /// Combo count recorded in the spec file; checked against the computed one at load.
    pub declared_combos: Option<usize>,
}

impl ProtocolSpec {
    pub fn field(&self, name: &str) -> Option<&FieldDescriptor> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn root(&self) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.parent.is_none())
            .expect("validated spec has a root segment")
    }

    pub fn children(&self, parent: &str) -> Vec<&Segment> {
        self.segments
            .iter()
            .filter(|s| s.parent.as_deref() == Some(parent))
            .collect()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Relations whose condition holds for `values` and whose fields are all in `path`.
    pub fn applicable_relations<'a>(
        &'a self,
        values: &'a BTreeMap<String, super::FieldValue>,
        path: &'a [String],
    ) -> impl Iterator<Item = &'a Relation> + 'a {
        self.relations.iter().filter(move |r| {
            condition_holds(r.when.as_ref(), values)
                && r.fields()
                    .iter()
                    .all(|f| path.iter().any(|p| p == f) || r.when.as_ref().is_some_and(|c| c.field == *f))
        })
    }

    /// Effective integer domain for `field` given the other values, with restrictions applied.
    pub fn effective_domain(
        &self,
        field: &FieldDescriptor,
        values: &BTreeMap<String, super::FieldValue>,
    ) -> ValueSet {
        let mut set = field.domain.universe().clone();
        for r in self.restrictions.iter().filter(|r| r.field == field.name) {
            if condition_holds(r.when.as_ref(), values) {
                set = set.intersect(&r.set);
            }
        }
        set
    }

    pub fn has_splice_points(&self) -> bool {
        !self.splice_points.is_empty()
    }
}

pub fn condition_holds(cond: Option<&Condition>, values: &BTreeMap<String, super::FieldValue>) -> bool {
    match cond {
        None => true,
        Some(c) => values
            .get(&c.field)
            .and_then(super::FieldValue::as_int)
            .is_some_and(|v| c.set.contains(v)),
    }
}
