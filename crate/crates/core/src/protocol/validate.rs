use serde::{Deserialize, Serialize};

use super::codec::{resolved_path, span_len};
use super::schema::*;
use super::{FieldValue, Frame};

/// Pseudo-field names used for violations that do not belong to a declared field.
pub const TRAILING: &str = "<trailing>";
pub const INSERTED: &str = "<inserted>";
pub const LAYOUT: &str = "<layout>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub constraint: String,
    /// Name of the violated relation, for relation checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        ValidationReport { valid: violations.is_empty(), violations }
    }

    /// Distinct relation names among the violations.
    pub fn violated_relations(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.violations.iter().filter_map(|v| v.relation.as_deref()).collect();
        out.dedup();
        out
    }

    pub fn first_field(&self) -> Option<&str> {
        self.violations.first().map(|v| v.field.as_str())
    }
}

/// Strict check of domains, restrictions and relations. Violations are ordered by
/// field declaration order; pseudo-fields come last.
pub fn validate_frame(frame: &Frame, spec: &ProtocolSpec) -> ValidationReport {
    let path = match resolved_path(spec, frame) {
        Ok(p) => p,
        Err(reason) => {
            return ValidationReport::from_violations(vec![Violation {
                field: LAYOUT.into(),
                constraint: reason,
                relation: None,
            }])
        }
    };
    let mut found: Vec<(usize, Violation)> = Vec::new();
    let order = |name: &str| spec.field_index(name).unwrap_or(usize::MAX);
    let mut push = |field: &str, constraint: String, relation: Option<&str>| {
        found.push((
            order(field),
            Violation { field: field.to_string(), constraint, relation: relation.map(str::to_string) },
        ));
    };

    for name in &path {
        let fd = spec.field(name).expect("path holds declared fields");
        let value = if frame.deleted.contains(name) { None } else { frame.values.get(name) };
        let Some(value) = value else {
            if fd.mandatory {
                push(name, "missing mandatory field".into(), None);
            }
            continue;
        };
        if let Some(msg) = domain_violation(fd, value) {
            push(name, msg, None);
            continue;
        }
        if let FieldValue::Int(v) = value {
            for r in spec.restrictions.iter().filter(|r| &r.field == name) {
                if condition_holds(r.when.as_ref(), &frame.values) && !r.set.contains(*v) {
                    let scope = r
                        .when
                        .as_ref()
                        .map(|c| format!(" when {}={}", c.field, c.set))
                        .unwrap_or_default();
                    push(name, format!("{v} not allowed{scope} (allowed {})", r.set), None);
                }
            }
        }
    }

    let present = |f: &str| path.iter().any(|p| p == f) && !frame.deleted.contains(f) && frame.values.contains_key(f);
    let mut end_length_applies = false;
    for rel in &spec.relations {
        if !condition_holds(rel.when.as_ref(), &frame.values) || !rel.fields().iter().all(|f| present(f)) {
            continue;
        }
        if matches!(&rel.kind, RelationKind::Length { to: SpanEnd::End, .. }) {
            end_length_applies = true;
        }
        if let Some(msg) = relation_violation(spec, frame, &path, rel) {
            push(rel.target(), format!("{}: {msg}", rel.name), Some(&rel.name));
        }
    }

    for ins in &frame.inserted {
        let at = match &ins.at {
            SplicePoint::After(f) => format!("after {f}"),
            SplicePoint::End => "at end".into(),
        };
        push(INSERTED, format!("undeclared field `{}` ({} bytes) {at}", ins.name, ins.bytes.len()), None);
    }
    if !frame.trailing.is_empty() && !end_length_applies {
        push(TRAILING, format!("{} unexpected trailing bytes", frame.trailing.len()), None);
    }

    found.sort_by_key(|(k, _)| *k);
    ValidationReport::from_violations(found.into_iter().map(|(_, v)| v).collect())
}

fn domain_violation(fd: &FieldDescriptor, value: &FieldValue) -> Option<String> {
    match (&fd.kind, value) {
        (FieldKind::Int { width_bits }, FieldValue::Int(v)) => {
            if *v > width_mask(*width_bits) {
                return Some(format!("{v} exceeds {width_bits}-bit width"));
            }
            match &fd.domain {
                Domain::Enum(s) if !s.contains(*v) => Some(format!("{v} not in enumerated domain {{{s}}}")),
                Domain::Range(s) | Domain::LengthOf(s) if !s.contains(*v) => Some(format!("{v} out of range {s}")),
                _ => None,
            }
        }
        (FieldKind::Bytes { fixed_len }, FieldValue::Bytes(b)) => {
            let n = b.len() as u64;
            if fixed_len.is_some_and(|f| f as u64 != n) || !fd.domain.universe().contains(n) {
                Some(format!("byte length {n} outside {}", fd.domain.universe()))
            } else {
                None
            }
        }
        _ => Some("wrong value kind".into()),
    }
}

fn int_of(frame: &Frame, f: &str) -> u128 {
    frame.values.get(f).and_then(FieldValue::as_int).unwrap_or(0) as u128
}

/// Expected value of a relation's target given the rest of the frame, when the relation defines one.
pub(crate) fn relation_expected(spec: &ProtocolSpec, frame: &Frame, path: &[String], rel: &Relation) -> Option<u128> {
    match &rel.kind {
        RelationKind::Length { from, to, .. } => span_len(spec, frame, path, from, to).map(|n| n as u128),
        RelationKind::Count { source, num, den, .. } => {
            let src = match source {
                CountSource::Field(f) => int_of(frame, f),
                CountSource::LenOf(f) => frame.values.get(f).and_then(FieldValue::as_bytes).map_or(0, |b| b.len()) as u128,
            };
            let (num, den) = (*num as u128, *den as u128);
            Some((src * num).div_ceil(den))
        }
        RelationKind::Equal { rhs, .. } => Some(match rhs {
            EqualRhs::Field(f) => int_of(frame, f),
            EqualRhs::Const(c) => *c as u128,
        }),
        RelationKind::Sum { .. } => None,
    }
}

fn relation_violation(spec: &ProtocolSpec, frame: &Frame, path: &[String], rel: &Relation) -> Option<String> {
    if let RelationKind::Sum { operands, bound } = &rel.kind {
        let total: u128 = operands.iter().map(|o| int_of(frame, o)).sum();
        return (total > *bound as u128).then(|| format!("sum {total} exceeds {bound}"));
    }
    let expected = relation_expected(spec, frame, path, rel)?;
    let actual = int_of(frame, rel.target());
    (actual != expected).then(|| format!("mismatch: declared {actual}, expected {expected}"))
}
