use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EngineConfig, InsertedBlob, MutationError, MutationRecord, MutationStrategy};
use crate::protocol::{
    decode_frame, encode_frame_with, validate_frame, width_mask, CountSource, EncodeMode, FieldKind, FieldValue,
    Frame, Insertion, ProtocolSpec, Relation, RelationKind, SpanEnd, SplicePoint, ValueSet,
};

/// A mutated frame, its records and the bytes to inject.
#[derive(Debug, Clone, PartialEq)]
pub struct Mutated {
    pub frame: Frame,
    pub records: Vec<MutationRecord>,
    pub bytes: Vec<u8>,
}

/// Mixture the field increment is drawn from. Weights need not sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaMix {
    /// Jump to 0, 1, max or max-1.
    pub boundary: f64,
    /// ±1..=small_max.
    pub small: f64,
    /// Uniform over the field width.
    pub uniform: f64,
    pub small_max: u64,
}

impl Default for DeltaMix {
    fn default() -> Self {
        DeltaMix { boundary: 0.35, small: 0.60, uniform: 0.05, small_max: 4 }
    }
}

/// Signed increment for a `width`-bit value `v`; never a multiple of 2^width.
pub fn sample_delta<R: Rng + ?Sized>(mix: &DeltaMix, v: u64, width: u32, rng: &mut R) -> i64 {
    let max = width_mask(width);
    let to_delta = |t: u64| -> i64 {
        if width >= 63 {
            t.wrapping_sub(v) as i64
        } else {
            t as i64 - v as i64
        }
    };
    loop {
        let total = mix.boundary + mix.small + mix.uniform;
        let x = rng.gen::<f64>() * total;
        let d = if x < mix.boundary {
            let targets = [0, 1, max, max.saturating_sub(1)];
            to_delta(targets[rng.gen_range(0..targets.len())])
        } else if x < mix.boundary + mix.small {
            let m = rng.gen_range(1..=mix.small_max.max(1)) as i64;
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        } else {
            to_delta(rng.gen_range(0..=max))
        };
        if apply_delta(v, d, width) != v {
            return d;
        }
    }
}

/// `(v + delta) mod 2^width`.
pub(crate) fn apply_delta(v: u64, delta: i64, width: u32) -> u64 {
    let m = 1i128 << width.min(64);
    (v as i128 + delta as i128).rem_euclid(m) as u64
}

fn encode(frame: &Frame, spec: &ProtocolSpec) -> Result<Vec<u8>, MutationError> {
    encode_frame_with(frame, spec, EncodeMode::Fuzz)
        .map(|e| e.bytes)
        .map_err(|e| MutationError::BadSeed(e.to_string()))
}

fn live_path(frame: &Frame) -> impl Iterator<Item = &String> {
    frame.path.iter().filter(move |f| !frame.deleted.contains(*f))
}

/// Field mutation: `ceil(rho * mutable)` integer fields, picked by priority,
/// each moved by a sampled increment in modular width arithmetic. Mutated
/// length fields are pinned so encoding keeps the mutated value.
pub fn mutate_field<R: Rng + ?Sized>(
    frame: &Frame,
    spec: &ProtocolSpec,
    strategy: &MutationStrategy,
    mix: &DeltaMix,
    rng: &mut R,
) -> Result<Mutated, MutationError> {
    let mut pool: Vec<(&str, f64)> = live_path(frame)
        .filter_map(|name| {
            let fd = spec.field(name)?;
            frame.values.get(name)?.as_int()?;
            let w = strategy.field_priorities.get(name).copied().unwrap_or(fd.priority);
            (w > 0.0 && w.is_finite()).then_some((name.as_str(), w))
        })
        .collect();
    if pool.is_empty() {
        return Err(MutationError::NoMutableFields);
    }
    let k = ((strategy.rho * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
    let mut out = frame.clone();
    let mut records = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = pool.iter().map(|p| p.1).sum();
        let mut x = rng.gen::<f64>() * total;
        let mut idx = pool.len() - 1;
        for (i, (_, w)) in pool.iter().enumerate() {
            if x < *w {
                idx = i;
                break;
            }
            x -= w;
        }
        let (name, _) = pool.swap_remove(idx);
        let fd = spec.field(name).expect("pool holds declared fields");
        let width = fd.width_bits().expect("pool holds integer fields");
        let v = frame.int(name).expect("pool holds integer values");
        let delta = sample_delta(mix, v, width, rng);
        let v_prime = apply_delta(v, delta, width);
        out.set_int(name, v_prime);
        if fd.domain.is_length() {
            out.pinned.insert(name.to_string());
        }
        records.push(MutationRecord::Field { field: name.to_string(), width, v, delta, v_prime });
    }
    let bytes = encode(&out, spec)?;
    Ok(Mutated { frame: out, records, bytes })
}

/// Structural mutation: splices random blobs at declared splice points
/// and/or drops mandatory fields from the byte stream.
pub fn mutate_structure<R: Rng + ?Sized>(
    frame: &Frame,
    spec: &ProtocolSpec,
    cfg: &EngineConfig,
    rng: &mut R,
) -> Result<Mutated, MutationError> {
    let splices: Vec<&SplicePoint> = spec
        .splice_points
        .iter()
        .filter(|p| match p {
            SplicePoint::After(f) => live_path(frame).any(|x| x == f),
            SplicePoint::End => true,
        })
        .collect();
    let deletable: Vec<&String> = live_path(frame)
        .filter(|f| spec.field(f).is_some_and(|fd| fd.mandatory) && frame.values.contains_key(*f))
        .collect();
    if splices.is_empty() && deletable.is_empty() {
        return Err(MutationError::NoMutableStructure);
    }
    let r: f64 = rng.gen();
    let (mut insert, mut delete) = (r < 0.75, r >= 0.5);
    if splices.is_empty() {
        (insert, delete) = (false, true);
    } else if deletable.is_empty() {
        (insert, delete) = (true, false);
    }

    let mut out = frame.clone();
    let mut inserted = Vec::new();
    if insert {
        let n = rng.gen_range(1..=cfg.max_inserts.max(1));
        for i in 0..n {
            let at = (*splices.choose(rng).expect("non-empty")).clone();
            let len = rng.gen_range(1..=cfg.max_blob_len.max(1));
            let mut bytes = vec![0u8; len];
            rng.fill_bytes(&mut bytes);
            let name = format!("ins{}", frame.inserted.len() + i);
            let at_name = match &at {
                SplicePoint::After(f) => f.clone(),
                SplicePoint::End => "end".to_string(),
            };
            inserted.push(InsertedBlob { name: name.clone(), at: at_name, len });
            out.inserted.push(Insertion { name, at, bytes });
        }
    }
    let mut deleted = Vec::new();
    if delete {
        let victim = (*deletable.choose(rng).expect("non-empty")).clone();
        out.deleted.insert(victim.clone());
        deleted.push(victim);
    }
    let bytes = encode(&out, spec)?;
    Ok(Mutated { frame: out, records: vec![MutationRecord::Structural { inserted, deleted }], bytes })
}

/// Semantic mutation: breaks one applicable relation. A candidate is kept only
/// if its bytes decode and validation then fails on that relation alone.
pub fn mutate_semantic<R: Rng + ?Sized>(
    frame: &Frame,
    spec: &ProtocolSpec,
    cfg: &EngineConfig,
    rng: &mut R,
) -> Result<Mutated, MutationError> {
    let relations: Vec<&Relation> = spec.applicable_relations(&frame.values, &frame.path).collect();
    if relations.is_empty() {
        return Err(MutationError::NoSemanticRelations);
    }
    for _ in 0..cfg.semantic_attempts.max(1) {
        let rel = *relations.choose(rng).expect("non-empty");
        let Some((cand, description, fields)) = anomaly(frame, spec, rel, rng) else {
            continue;
        };
        let Ok(bytes) = encode(&cand, spec) else {
            continue;
        };
        let Ok(decoded) = decode_frame(&bytes, spec) else {
            continue;
        };
        let report = validate_frame(&decoded, spec);
        let only_target =
            !report.violations.is_empty() && report.violations.iter().all(|v| v.relation.as_deref() == Some(&rel.name));
        if only_target {
            let records = vec![MutationRecord::Semantic { relation: rel.name.clone(), fields, description }];
            return Ok(Mutated { frame: cand, records, bytes });
        }
    }
    Err(MutationError::SemanticCheckFailed)
}

fn span_fields<'a>(frame: &'a Frame, from: &str, to: &SpanEnd) -> &'a [String] {
    let i = frame.path.iter().position(|p| p == from).unwrap_or(0);
    let j = match to {
        SpanEnd::End => frame.path.len().saturating_sub(1),
        SpanEnd::Field(f) => frame.path.iter().position(|p| p == f).unwrap_or(i),
    };
    &frame.path[i..=j.max(i)]
}

/// A value of `set` other than `current`, near it with probability 0.7.
fn other_value<R: Rng + ?Sized>(set: &ValueSet, current: u64, rng: &mut R) -> Option<u64> {
    for _ in 0..16 {
        let v = if rng.gen_bool(0.7) {
            let d = rng.gen_range(1..=4u64);
            if rng.gen_bool(0.5) {
                current.checked_add(d)?
            } else {
                current.checked_sub(d).unwrap_or(current + d)
            }
        } else {
            set.sample(rng)?
        };
        if v != current && set.contains(v) {
            return Some(v);
        }
    }
    None
}

fn resize<R: Rng + ?Sized>(frame: &mut Frame, spec: &ProtocolSpec, field: &str, rng: &mut R) -> Option<(usize, usize)> {
    let fd = spec.field(field)?;
    let old = frame.values.get(field)?.as_bytes()?.to_vec();
    let allowed = fd.domain.universe();
    for _ in 0..8 {
        let d = rng.gen_range(1..=4usize);
        let new_len = if rng.gen_bool(0.5) { old.len() + d } else { old.len().checked_sub(d)? };
        if new_len == old.len() || !allowed.contains(new_len as u64) {
            continue;
        }
        let mut b = old.clone();
        b.resize(new_len, 0);
        if new_len > old.len() {
            rng.fill_bytes(&mut b[old.len()..]);
        }
        frame.values.insert(field.to_string(), FieldValue::Bytes(b));
        return Some((old.len(), new_len));
    }
    None
}

/// One anomaly for `rel`, with a description and the fields it changed.
fn anomaly<R: Rng + ?Sized>(
    frame: &Frame,
    spec: &ProtocolSpec,
    rel: &Relation,
    rng: &mut R,
) -> Option<(Frame, String, Vec<String>)> {
    let mut out = frame.clone();
    match &rel.kind {
        RelationKind::Length { target, from, to } => {
            let declared = frame.int(target)?;
            let opaque: Vec<&String> = span_fields(frame, from, to)
                .iter()
                .filter(|f| spec.field(f).is_some_and(|fd| matches!(fd.kind, FieldKind::Bytes { fixed_len: None })))
                .collect();
            out.pinned.insert(target.clone());
            if opaque.len() == 1 && rng.gen_bool(0.5) {
                let f = opaque[0].clone();
                let (a, b) = resize(&mut out, spec, &f, rng)?;
                Some((out, format!("{f} resized from {a} to {b} bytes, {target} kept at {declared}"), vec![f]))
            } else {
                let fd = spec.field(target)?;
                let v = other_value(fd.domain.universe(), declared, rng)?;
                out.set_int(target, v);
                Some((out, format!("{target} set to {v}, span is {declared} bytes"), vec![target.clone()]))
            }
        }
        RelationKind::Count { target, source, .. } => {
            out.pinned.insert(target.clone());
            let change_source = rng.gen_bool(0.7);
            match (source, change_source) {
                (CountSource::Field(src), true) => {
                    let fd = spec.field(src)?;
                    let cur = frame.int(src)?;
                    let dom = spec.effective_domain(fd, &frame.values);
                    let v = other_value(&dom, cur, rng)?;
                    out.set_int(src, v);
                    Some((out, format!("{src} changed from {cur} to {v}, {target} kept"), vec![src.clone()]))
                }
                (CountSource::LenOf(src), true) => {
                    let (a, b) = resize(&mut out, spec, src, rng)?;
                    Some((out, format!("{src} resized from {a} to {b} bytes, {target} kept"), vec![src.clone()]))
                }
                _ => {
                    let cur = frame.int(target)?;
                    let v = other_value(spec.field(target)?.domain.universe(), cur, rng)?;
                    out.set_int(target, v);
                    Some((out, format!("{target} changed from {cur} to {v}"), vec![target.clone()]))
                }
            }
        }
        RelationKind::Equal { target, .. } => {
            out.pinned.insert(target.clone());
            let cur = frame.int(target)?;
            let v = other_value(spec.field(target)?.domain.universe(), cur, rng)?;
            out.set_int(target, v);
            Some((out, format!("{target} changed from {cur} to {v}"), vec![target.clone()]))
        }
        RelationKind::Sum { operands, bound } => {
            let op = operands.choose(rng)?;
            let others: u64 = operands.iter().filter(|o| *o != op).map(|o| frame.int(o).unwrap_or(0)).sum();
            let fd = spec.field(op)?;
            let lo = bound.saturating_sub(others).saturating_add(1);
            let dom = spec.effective_domain(fd, &frame.values).intersect(&ValueSet::range(lo, u64::MAX));
            let v = dom.sample(rng)?;
            out.set_int(op, v);
            Some((out, format!("{op} set to {v}, sum {} exceeds {bound}", others + v), vec![op.clone()]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn modular_closure_examples() {
        assert_eq!(apply_delta(3, 125, 8), 128);
        assert_eq!(apply_delta(0xFFFF, 1, 16), 0);
        assert_eq!(apply_delta(0, -1, 16), 0xFFFF);
        assert_eq!(apply_delta(5, -5, 64), 0);
    }

    #[test]
    fn deltas_are_never_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mix = DeltaMix::default();
        for w in [8u32, 16, 32, 64] {
            for _ in 0..500 {
                let v = rng.gen::<u64>() & width_mask(w);
                let d = sample_delta(&mix, v, w, &mut rng);
                assert_ne!(apply_delta(v, d, w), v);
            }
        }
    }
}
