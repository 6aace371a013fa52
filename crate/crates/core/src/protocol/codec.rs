use std::collections::BTreeMap;

use thiserror::Error;

use super::schema::*;
use super::{FieldValue, Frame};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("input ends inside field `{field}` at offset {offset} (needs {needed} bytes, {available} left)")]
    TooShort { field: String, offset: usize, needed: usize, available: usize },
    #[error("no layout matches: {0}")]
    UnknownLayout(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("mandatory field `{0}` has no value")]
    MissingField(String),
    #[error("value {value} does not fit field `{field}`")]
    ValueOutOfWidth { field: String, value: String },
    #[error("field `{0}` holds the wrong kind of value")]
    KindMismatch(String),
    #[error("no layout matches: {0}")]
    NoLayout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Reject out-of-width values.
    Strict,
    /// Truncate out-of-width values and report which fields were cut.
    Fuzz,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub truncated: Vec<String>,
}

/// Structural parse. Field domains and relations are not checked here, only
/// layout: magic fields must hold a domain value and every field must fit.
pub fn decode_frame(bytes: &[u8], spec: &ProtocolSpec) -> Result<Frame, DecodeError> {
    if bytes.is_empty() {
        let first = spec.root().fields.first().cloned().unwrap_or_default();
        return Err(DecodeError::TooShort { field: first, offset: 0, needed: 1, available: 0 });
    }
    let mut values = BTreeMap::new();
    let mut path = Vec::new();
    let mut pos = 0usize;
    let mut seg = spec.root();
    loop {
        for name in &seg.fields {
            let fd = spec.field(name).expect("validated spec");
            let left = bytes.len() - pos;
            let value = match fd.kind {
                FieldKind::Int { width_bits } => {
                    let n = (width_bits / 8) as usize;
                    if left < n {
                        return Err(DecodeError::TooShort { field: name.clone(), offset: pos, needed: n, available: left });
                    }
                    let v = read_uint(&bytes[pos..pos + n], fd.endian);
                    pos += n;
                    FieldValue::Int(v)
                }
                FieldKind::Bytes { fixed_len: Some(n) } => {
                    if left < n {
                        return Err(DecodeError::TooShort { field: name.clone(), offset: pos, needed: n, available: left });
                    }
                    pos += n;
                    FieldValue::Bytes(bytes[pos - n..pos].to_vec())
                }
                FieldKind::Bytes { fixed_len: None } => {
                    let b = bytes[pos..].to_vec();
                    pos = bytes.len();
                    FieldValue::Bytes(b)
                }
            };
            if spec.magic.iter().any(|m| m == name) {
                let v = value.as_int().unwrap_or_default();
                if !fd.domain.universe().contains(v) {
                    return Err(DecodeError::UnknownLayout(format!("magic field `{name}` holds {v}")));
                }
            }
            values.insert(name.clone(), value);
            path.push(name.clone());
        }
        match select_child(spec, &seg.name, &values) {
            ChildChoice::Leaf => break,
            ChildChoice::Next(next) => seg = next,
            ChildChoice::NoMatch(reason) => return Err(DecodeError::UnknownLayout(reason)),
        }
    }
    Ok(Frame {
        spec_id: spec.protocol_id.clone(),
        values,
        path,
        trailing: bytes[pos..].to_vec(),
        raw: Some(bytes.to_vec()),
        ..Default::default()
    })
}

enum ChildChoice<'a> {
    Leaf,
    Next(&'a Segment),
    NoMatch(String),
}

fn select_child<'a>(spec: &'a ProtocolSpec, seg: &str, values: &BTreeMap<String, FieldValue>) -> ChildChoice<'a> {
    let kids = spec.children(seg);
    if kids.is_empty() {
        return ChildChoice::Leaf;
    }
    let mut fallback = None;
    for k in kids {
        match &k.selector {
            Selector::When(c) if condition_holds(Some(c), values) => return ChildChoice::Next(k),
            Selector::Otherwise => fallback = Some(k),
            _ => {}
        }
    }
    match fallback {
        Some(k) => ChildChoice::Next(k),
        None => ChildChoice::NoMatch(format!("no variant of segment `{seg}` matches")),
    }
}

/// Field order the segment tree assigns to `values`.
pub fn layout_path(spec: &ProtocolSpec, values: &BTreeMap<String, FieldValue>) -> Result<Vec<String>, String> {
    let mut path = Vec::new();
    let mut seg = spec.root();
    loop {
        path.extend(seg.fields.iter().cloned());
        match select_child(spec, &seg.name, values) {
            ChildChoice::Leaf => return Ok(path),
            ChildChoice::Next(next) => seg = next,
            ChildChoice::NoMatch(reason) => return Err(reason),
        }
    }
}

pub(crate) fn resolved_path(spec: &ProtocolSpec, frame: &Frame) -> Result<Vec<String>, String> {
    if frame.path.is_empty() {
        layout_path(spec, &frame.values)
    } else {
        Ok(frame.path.clone())
    }
}

fn field_size(spec: &ProtocolSpec, name: &str, value: Option<&FieldValue>) -> usize {
    let fd = spec.field(name).expect("path holds declared fields");
    match fd.kind {
        FieldKind::Int { width_bits } => (width_bits / 8) as usize,
        FieldKind::Bytes { fixed_len: Some(n) } => n,
        FieldKind::Bytes { fixed_len: None } => value.and_then(FieldValue::as_bytes).map_or(0, <[u8]>::len),
    }
}

/// Byte length of the span `from..to` as it is (or would be) emitted: deleted fields
/// are skipped, inserted blobs inside the span are counted, and an `end` span includes
/// trailing bytes.
pub(crate) fn span_len(spec: &ProtocolSpec, frame: &Frame, path: &[String], from: &str, to: &SpanEnd) -> Option<usize> {
    let i = path.iter().position(|p| p == from)?;
    let j = match to {
        SpanEnd::End => path.len() - 1,
        SpanEnd::Field(f) => path.iter().position(|p| p == f)?,
    };
    if j < i {
        return Some(0);
    }
    let mut total = 0;
    for (k, name) in path.iter().enumerate().take(j + 1).skip(i) {
        if !frame.deleted.contains(name) {
            total += field_size(spec, name, frame.values.get(name));
        }
        let inside = k < j || matches!(to, SpanEnd::End);
        if inside {
            total += frame
                .inserted
                .iter()
                .filter(|ins| matches!(&ins.at, SplicePoint::After(a) if a == name))
                .map(|ins| ins.bytes.len())
                .sum::<usize>();
        }
    }
    if matches!(to, SpanEnd::End) {
        total += frame
            .inserted
            .iter()
            .filter(|ins| ins.at == SplicePoint::End)
            .map(|ins| ins.bytes.len())
            .sum::<usize>();
        total += frame.trailing.len();
    }
    Some(total)
}

/// Strict encode.
pub fn encode_frame(frame: &Frame, spec: &ProtocolSpec) -> Result<Vec<u8>, EncodeError> {
    encode_frame_with(frame, spec, EncodeMode::Strict).map(|e| e.bytes)
}

/// Encodes a frame. Unpinned length fields are recomputed unless fields were
/// deleted (a deletion keeps the original lengths so the hole stays visible).
pub fn encode_frame_with(frame: &Frame, spec: &ProtocolSpec, mode: EncodeMode) -> Result<Encoded, EncodeError> {
    let path = resolved_path(spec, frame).map_err(EncodeError::NoLayout)?;
    let mut values = frame.values.clone();
    for name in &path {
        let fd = spec.field(name).expect("path holds declared fields");
        if fd.mandatory && !frame.deleted.contains(name) && !values.contains_key(name) {
            return Err(EncodeError::MissingField(name.clone()));
        }
    }
    if frame.deleted.is_empty() {
        for rel in &spec.relations {
            if let RelationKind::Length { target, from, to } = &rel.kind {
                if frame.pinned.contains(target)
                    || !path.contains(target)
                    || !condition_holds(rel.when.as_ref(), &values)
                {
                    continue;
                }
                if let Some(n) = span_len(spec, frame, &path, from, to) {
                    values.insert(target.clone(), FieldValue::Int(n as u64));
                }
            }
        }
    }

    let mut out = Vec::new();
    let mut truncated = Vec::new();
    for name in &path {
        if !frame.deleted.contains(name) {
            if let Some(v) = values.get(name) {
                let fd = spec.field(name).expect("path holds declared fields");
                if write_field(&mut out, fd, v, mode)? {
                    truncated.push(name.clone());
                }
            }
        }
        for ins in frame.inserted.iter().filter(|i| matches!(&i.at, SplicePoint::After(a) if a == name)) {
            out.extend_from_slice(&ins.bytes);
        }
    }
    for ins in frame.inserted.iter().filter(|i| i.at == SplicePoint::End) {
        out.extend_from_slice(&ins.bytes);
    }
    out.extend_from_slice(&frame.trailing);
    Ok(Encoded { bytes: out, truncated })
}

/// Appends one field, returning whether it had to be truncated.
fn write_field(out: &mut Vec<u8>, fd: &FieldDescriptor, v: &FieldValue, mode: EncodeMode) -> Result<bool, EncodeError> {
    match (&fd.kind, v) {
        (FieldKind::Int { width_bits }, FieldValue::Int(x)) => {
            let mask = width_mask(*width_bits);
            let cut = *x > mask;
            if cut && mode == EncodeMode::Strict {
                return Err(EncodeError::ValueOutOfWidth { field: fd.name.clone(), value: x.to_string() });
            }
            write_uint(out, *x & mask, (*width_bits / 8) as usize, fd.endian);
            Ok(cut)
        }
        (FieldKind::Bytes { fixed_len: Some(n) }, FieldValue::Bytes(b)) => {
            let cut = b.len() != *n;
            if cut && mode == EncodeMode::Strict {
                return Err(EncodeError::ValueOutOfWidth { field: fd.name.clone(), value: hex::encode(b) });
            }
            let mut b = b.clone();
            b.resize(*n, 0);
            out.extend_from_slice(&b);
            Ok(cut)
        }
        (FieldKind::Bytes { fixed_len: None }, FieldValue::Bytes(b)) => {
            out.extend_from_slice(b);
            Ok(false)
        }
        _ => Err(EncodeError::KindMismatch(fd.name.clone())),
    }
}

fn read_uint(b: &[u8], endian: Endian) -> u64 {
    let fold = |acc: u64, &x: &u8| (acc << 8) | x as u64;
    match endian {
        Endian::Big => b.iter().fold(0, fold),
        Endian::Little => b.iter().rev().fold(0, fold),
    }
}

fn write_uint(out: &mut Vec<u8>, v: u64, n: usize, endian: Endian) {
    let be = v.to_be_bytes();
    let bytes = &be[8 - n..];
    match endian {
        Endian::Big => out.extend_from_slice(bytes),
        Endian::Little => out.extend(bytes.iter().rev()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uint_round_trip_both_endians() {
        for endian in [Endian::Big, Endian::Little] {
            let mut out = Vec::new();
            write_uint(&mut out, 0x0A0B0C, 3, endian);
            assert_eq!(read_uint(&out, endian), 0x0A0B0C);
        }
        let mut out = Vec::new();
        write_uint(&mut out, 0x0102, 2, Endian::Little);
        assert_eq!(out, [0x02, 0x01]);
    }
}
