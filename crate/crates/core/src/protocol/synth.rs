//! Random generation of frames that satisfy every domain, restriction and relation of a spec.

use std::collections::BTreeMap;

use rand::Rng;

use super::codec::{layout_path, span_len};
use super::combos::{combos_of_frame, Combo};
use super::schema::*;
use super::validate::{relation_expected, validate_frame};
use super::valueset::ValueSet;
use super::{FieldValue, Frame};

const ATTEMPTS: usize = 256;

pub struct Synthesizer<'a> {
    spec: &'a ProtocolSpec,
}

impl<'a> Synthesizer<'a> {
    pub fn new(spec: &'a ProtocolSpec) -> Self {
        Synthesizer { spec }
    }

    /// A valid frame with classes picked uniformly per field. `None` only if the
    /// spec's constraints could not be met within the attempt budget.
    pub fn frame<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Frame> {
        (0..ATTEMPTS).find_map(|_| self.attempt(rng, None))
    }

    /// A valid frame containing `combo`, or `None` if none was found (the combo may be unreachable).
    pub fn frame_with<R: Rng + ?Sized>(&self, rng: &mut R, combo: &Combo) -> Option<Frame> {
        (0..ATTEMPTS).find_map(|_| {
            self.attempt(rng, Some(combo))
                .filter(|f| combos_of_frame(self.spec, f).contains(combo))
        })
    }

    fn attempt<R: Rng + ?Sized>(&self, rng: &mut R, force: Option<&Combo>) -> Option<Frame> {
        let spec = self.spec;
        let mut values: BTreeMap<String, FieldValue> = BTreeMap::new();
        let mut seg = spec.root();
        loop {
            for name in &seg.fields {
                let fd = spec.field(name)?;
                let forced = force.filter(|c| &c.field == name).map(|c| c.class.as_str());
                values.insert(name.clone(), pick_value(spec, fd, &values, forced, rng)?);
            }
            let kids = spec.children(&seg.name);
            if kids.is_empty() {
                break;
            }
            let matched = kids.iter().find(|k| matches!(&k.selector, Selector::When(c) if condition_holds(Some(c), &values)));
            seg = match matched {
                Some(k) => k,
                None => kids.iter().find(|k| matches!(k.selector, Selector::Otherwise))?,
            };
        }
        let path = layout_path(spec, &values).ok()?;
        let mut frame = Frame { spec_id: spec.protocol_id.clone(), values, path, ..Default::default() };
        resolve_relations(spec, &mut frame, rng);
        validate_frame(&frame, spec).valid.then_some(frame)
    }
}

fn pick_value<R: Rng + ?Sized>(
    spec: &ProtocolSpec,
    fd: &FieldDescriptor,
    values: &BTreeMap<String, FieldValue>,
    forced: Option<&str>,
    rng: &mut R,
) -> Option<FieldValue> {
    let allowed = match fd.kind {
        FieldKind::Int { .. } => spec.effective_domain(fd, values),
        FieldKind::Bytes { .. } => fd.domain.universe().clone(),
    };
    let candidates: Vec<ValueSet> = fd
        .value_classes
        .iter()
        .filter(|c| forced.is_none_or(|f| f == c.name))
        .map(|c| c.set.intersect(&allowed))
        .filter(|s| !s.is_empty())
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let key = candidates[rng.gen_range(0..candidates.len())].sample(rng)?;
    Some(match fd.kind {
        FieldKind::Int { .. } => FieldValue::Int(key),
        FieldKind::Bytes { .. } => FieldValue::Bytes(random_bytes(rng, key as usize)),
    })
}

fn random_bytes<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u8> {
    let mut b = vec![0u8; n];
    rng.fill_bytes(&mut b);
    b
}

/// Makes count, equal and length relations hold. Opaque spans measured by a
/// count-determined length field are resized to match.
fn resolve_relations<R: Rng + ?Sized>(spec: &ProtocolSpec, frame: &mut Frame, rng: &mut R) {
    let path = frame.path.clone();
    let applies = |rel: &Relation, frame: &Frame| {
        condition_holds(rel.when.as_ref(), &frame.values) && rel.fields().iter().all(|f| path.iter().any(|p| p == f))
    };
    for rel in &spec.relations {
        if let RelationKind::Count { target, .. } = &rel.kind {
            if !applies(rel, frame) {
                continue;
            }
            let Some(v) = relation_expected(spec, frame, &path, rel) else { continue };
            let v = v.min(u64::MAX as u128) as u64;
            frame.values.insert(target.clone(), FieldValue::Int(v));
            for other in &spec.relations {
                if let RelationKind::Length { target: t, from, to: SpanEnd::Field(to) } = &other.kind {
                    let single_opaque = from == to && spec.field(from).is_some_and(|f| !f.is_int());
                    if t == target && single_opaque && applies(other, frame) {
                        frame.values.insert(from.clone(), FieldValue::Bytes(random_bytes(rng, v as usize)));
                    }
                }
            }
        }
    }
    for rel in &spec.relations {
        if let RelationKind::Equal { target, .. } = &rel.kind {
            if applies(rel, frame) {
                if let Some(v) = relation_expected(spec, frame, &path, rel) {
                    frame.values.insert(target.clone(), FieldValue::Int(v as u64));
                }
            }
        }
    }
    for rel in &spec.relations {
        if let RelationKind::Length { target, from, to } = &rel.kind {
            if applies(rel, frame) {
                if let Some(n) = span_len(spec, frame, &path, from, to) {
                    frame.values.insert(target.clone(), FieldValue::Int(n as u64));
                }
            }
        }
    }
}
