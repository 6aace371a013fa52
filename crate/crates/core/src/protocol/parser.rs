//! Loader for the line-oriented `.spec` format. The grammar lives in
//! `docs/spec-format.md`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use thiserror::Error;

use super::schema::*;
use super::valueset::{parse_int, ValueSet};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid spec: {0}")]
    Invalid(String),
}

fn syntax(line: usize, message: impl Into<String>) -> SpecError {
    SpecError::Syntax { line, message: message.into() }
}

/// Reads a spec file and, when it names one, its reply spec (resolved relative to the file).
pub fn load_spec(path: impl AsRef<Path>) -> Result<ProtocolSpec, SpecError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (mut spec, reply) = parse_inner(&text)?;
    if let Some(reply_path) = reply {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let reply_spec = load_spec(base.join(reply_path))?;
        spec.reply = Some(Box::new(reply_spec));
    }
    Ok(spec)
}

/// Parses spec text. A `reply` directive is ignored here since there is no base directory to resolve it against.
pub fn parse_spec(text: &str) -> Result<ProtocolSpec, SpecError> {
    parse_inner(text).map(|(spec, _)| spec)
}

struct RawField {
    line: usize,
    desc: FieldDescriptor,
}

fn parse_inner(text: &str) -> Result<(ProtocolSpec, Option<String>), SpecError> {
    let mut protocol_id = None;
    let mut port = None;
    let mut endian = Endian::Big;
    let mut reply = None;
    let mut exception = None;
    let mut fields: Vec<RawField> = Vec::new();
    let mut classes: Vec<(usize, String, ValueClass)> = Vec::new();
    let mut segments = Vec::new();
    let mut relations = Vec::new();
    let mut restrictions = Vec::new();
    let mut splice_points = Vec::new();
    let mut magic = Vec::new();
    let mut probes = Vec::new();
    let mut declared_combos = None;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let args = &toks[1..];
        match toks[0] {
            "protocol" => protocol_id = Some(one_arg(args, line_no)?.to_string()),
            "port" => {
                let v = parse_int(one_arg(args, line_no)?).map_err(|e| syntax(line_no, e))?;
                port = Some(u16::try_from(v).map_err(|_| syntax(line_no, "port out of range"))?);
            }
            "endian" => endian = parse_endian(one_arg(args, line_no)?, line_no)?,
            "reply" => reply = Some(one_arg(args, line_no)?.to_string()),
            "exception" => {
                if args.len() != 3 || args[1] != "mask" {
                    return Err(syntax(line_no, "expected `exception <field> mask <int>`"));
                }
                let mask = parse_int(args[2]).map_err(|e| syntax(line_no, e))?;
                exception = Some(ExceptionMarker { field: args[0].to_string(), mask });
            }
            "field" => fields.push(RawField { line: line_no, desc: parse_field(args, endian, line_no)? }),
            "class" => {
                if args.len() < 3 {
                    return Err(syntax(line_no, "expected `class <field> <name> <set>`"));
                }
                let set = ValueSet::parse(&args[2..].join("")).map_err(|e| syntax(line_no, e))?;
                classes.push((line_no, args[0].to_string(), ValueClass { name: args[1].to_string(), set }));
            }
            "segment" => segments.push(parse_segment(args, line_no)?),
            "restrict" => {
                let (body, when) = split_when(args, line_no)?;
                if body.len() < 2 {
                    return Err(syntax(line_no, "expected `restrict <field> <set>`"));
                }
                let set = ValueSet::parse(&body[1..].join("")).map_err(|e| syntax(line_no, e))?;
                restrictions.push(Restriction { field: body[0].to_string(), set, when });
            }
            "relation" => relations.push(parse_relation(args, line_no)?),
            "splice" => match args {
                ["after", f] => splice_points.push(SplicePoint::After(f.to_string())),
                ["end"] => splice_points.push(SplicePoint::End),
                _ => return Err(syntax(line_no, "expected `splice after <field>` or `splice end`")),
            },
            "magic" => magic.extend(args.iter().map(|s| s.to_string())),
            "probe" => {
                let bytes = hex::decode(args.concat()).map_err(|e| syntax(line_no, format!("bad probe hex: {e}")))?;
                probes.push(bytes);
            }
            "combos" => {
                let v = parse_int(one_arg(args, line_no)?).map_err(|e| syntax(line_no, e))?;
                declared_combos = Some(v as usize);
            }
            other => return Err(syntax(line_no, format!("unknown directive `{other}`"))),
        }
    }

    let protocol_id = protocol_id.ok_or_else(|| SpecError::Invalid("missing `protocol` directive".into()))?;
    let default_port = port.ok_or_else(|| SpecError::Invalid("missing `port` directive".into()))?;

    let mut seen = BTreeSet::new();
    for f in &fields {
        if !seen.insert(f.desc.name.clone()) {
            return Err(syntax(f.line, format!("duplicate field `{}`", f.desc.name)));
        }
    }
    for (line, field, class) in classes {
        let f = fields
            .iter_mut()
            .find(|f| f.desc.name == field)
            .ok_or_else(|| syntax(line, format!("class for undeclared field `{field}`")))?;
        f.desc.value_classes.push(class);
    }
    let mut fields: Vec<FieldDescriptor> = fields.into_iter().map(|f| f.desc).collect();
    for f in &mut fields {
        if f.value_classes.is_empty() {
            f.value_classes.push(ValueClass { name: "all".into(), set: f.domain.universe().clone() });
        }
    }

    let mut spec = ProtocolSpec {
        protocol_id,
        default_port,
        fields,
        segments,
        relations,
        restrictions,
        splice_points,
        magic,
        probes,
        exception,
        reply: None,
        declared_combos,
    };
    check_spec(&spec)?;
    compute_offsets(&mut spec);
    if let Some(n) = spec.declared_combos {
        let actual = super::combos::enumerate_combos(&spec).len();
        if actual != n {
            return Err(SpecError::Invalid(format!("file records {n} combos but classes define {actual}")));
        }
    }
    Ok((spec, reply))
}

fn one_arg<'a>(args: &[&'a str], line: usize) -> Result<&'a str, SpecError> {
    match args {
        [a] => Ok(a),
        _ => Err(syntax(line, "expected exactly one argument")),
    }
}

fn parse_endian(s: &str, line: usize) -> Result<Endian, SpecError> {
    match s {
        "big" | "be" => Ok(Endian::Big),
        "little" | "le" => Ok(Endian::Little),
        _ => Err(syntax(line, format!("unknown endianness `{s}`"))),
    }
}

fn parse_field(args: &[&str], default_endian: Endian, line: usize) -> Result<FieldDescriptor, SpecError> {
    if args.len() < 3 {
        return Err(syntax(line, "expected `field <name> <type> ... <domain>`"));
    }
    let name = args[0].to_string();
    let kind = parse_kind(args[1], line)?;
    let mut endian = default_endian;
    let mut mandatory = false;
    let mut priority = 1.0;
    let mut i = 2;
    while i < args.len() {
        match args[i] {
            "le" | "be" => endian = parse_endian(args[i], line)?,
            "mandatory" => mandatory = true,
            t if t.starts_with("priority=") => {
                priority = t["priority=".len()..]
                    .parse::<f64>()
                    .ok()
                    .filter(|p| p.is_finite() && *p >= 0.0)
                    .ok_or_else(|| syntax(line, format!("bad priority `{t}`")))?;
            }
            _ => break,
        }
        i += 1;
    }
    let dom_kw = *args.get(i).ok_or_else(|| syntax(line, "missing domain"))?;
    let rest = args[i + 1..].join("");
    let set = |default: Option<ValueSet>| -> Result<ValueSet, SpecError> {
        if rest.is_empty() {
            default.ok_or_else(|| syntax(line, format!("domain `{dom_kw}` needs a value set")))
        } else {
            ValueSet::parse(&rest).map_err(|e| syntax(line, e))
        }
    };
    let domain = match (dom_kw, &kind) {
        ("enum", FieldKind::Int { .. }) => Domain::Enum(set(None)?),
        ("range", FieldKind::Int { width_bits }) => Domain::Range(set(Some(ValueSet::range(0, width_mask(*width_bits))))?),
        ("length", FieldKind::Int { width_bits }) => {
            Domain::LengthOf(set(Some(ValueSet::range(0, width_mask(*width_bits))))?)
        }
        ("opaque", FieldKind::Bytes { fixed_len }) => {
            let default = match fixed_len {
                Some(n) => ValueSet::single(*n as u64),
                None => ValueSet::range(0, 65535),
            };
            Domain::Opaque(set(Some(default))?)
        }
        ("opaque", _) => return Err(syntax(line, "opaque domain needs a bytes field")),
        (_, FieldKind::Bytes { .. }) => return Err(syntax(line, "bytes fields take an opaque domain")),
        (other, _) => return Err(syntax(line, format!("unknown domain `{other}`"))),
    };
    Ok(FieldDescriptor {
        name,
        kind,
        endian,
        domain,
        mandatory,
        priority,
        value_classes: Vec::new(),
        offset: None,
    })
}

fn parse_kind(s: &str, line: usize) -> Result<FieldKind, SpecError> {
    if let Some(bits) = s.strip_prefix('u') {
        let w: u32 = bits.parse().map_err(|_| syntax(line, format!("bad type `{s}`")))?;
        if w == 0 || w > 64 || w % 8 != 0 {
            return Err(syntax(line, format!("integer width must be a byte multiple in 8..64, got {w}")));
        }
        return Ok(FieldKind::Int { width_bits: w });
    }
    if s == "bytes" {
        return Ok(FieldKind::Bytes { fixed_len: None });
    }
    if let Some(n) = s.strip_prefix("bytes[").and_then(|r| r.strip_suffix(']')) {
        let n = parse_int(n).map_err(|e| syntax(line, e))? as usize;
        if n == 0 {
            return Err(syntax(line, "fixed byte field must be non-empty"));
        }
        return Ok(FieldKind::Bytes { fixed_len: Some(n) });
    }
    Err(syntax(line, format!("unknown type `{s}`")))
}

fn parse_condition(tok: &str, line: usize) -> Result<Condition, SpecError> {
    let (field, set) = tok
        .split_once('=')
        .ok_or_else(|| syntax(line, format!("expected `<field>=<set>`, got `{tok}`")))?;
    Ok(Condition {
        field: field.to_string(),
        set: ValueSet::parse(set).map_err(|e| syntax(line, e))?,
    })
}

fn split_when<'a>(args: &'a [&'a str], line: usize) -> Result<(&'a [&'a str], Option<Condition>), SpecError> {
    match args.iter().position(|t| *t == "when") {
        None => Ok((args, None)),
        Some(p) => {
            let cond = args[p + 1..].join("");
            Ok((&args[..p], Some(parse_condition(&cond, line)?)))
        }
    }
}

fn parse_segment(args: &[&str], line: usize) -> Result<Segment, SpecError> {
    let colon = args
        .iter()
        .position(|t| *t == ":")
        .ok_or_else(|| syntax(line, "segment needs `:` before its field list"))?;
    let head = &args[..colon];
    let fields: Vec<String> = args[colon + 1..].iter().map(|s| s.to_string()).collect();
    let name = head.first().ok_or_else(|| syntax(line, "segment needs a name"))?.to_string();
    let mut parent = None;
    let mut selector = Selector::Root;
    let mut i = 1;
    while i < head.len() {
        if let Some(p) = head[i].strip_prefix("parent=") {
            parent = Some(p.to_string());
        } else if head[i] == "when" {
            let rest = head.get(i + 1..).map(|r| r.join("")).unwrap_or_default();
            selector = if rest == "*" {
                Selector::Otherwise
            } else {
                Selector::When(parse_condition(&rest, line)?)
            };
            break;
        } else {
            return Err(syntax(line, format!("unexpected `{}` in segment header", head[i])));
        }
        i += 1;
    }
    if parent.is_some() == matches!(selector, Selector::Root) {
        return Err(syntax(line, "child segments need both `parent=` and `when`; the root has neither"));
    }
    Ok(Segment { name, parent, selector, fields })
}

fn parse_relation(args: &[&str], line: usize) -> Result<Relation, SpecError> {
    let (body, when) = split_when(args, line)?;
    if body.len() < 3 {
        return Err(syntax(line, "expected `relation <name> <kind> ...`"));
    }
    let name = body[0].to_string();
    let rest = &body[2..];
    let kind = match body[1] {
        "length" => match rest {
            [target, "=", span] => {
                let (from, to) = span
                    .split_once("..")
                    .ok_or_else(|| syntax(line, "length span must be `<from>..<to|end>`"))?;
                let to = if to == "end" { SpanEnd::End } else { SpanEnd::Field(to.to_string()) };
                RelationKind::Length { target: target.to_string(), from: from.to_string(), to }
            }
            _ => return Err(syntax(line, "expected `length <target> = <from>..<to|end>`")),
        },
        "count" => match rest {
            [target, "=", src, "*", factor] => {
                let source = match src.strip_prefix("len(").and_then(|s| s.strip_suffix(')')) {
                    Some(f) => CountSource::LenOf(f.to_string()),
                    None => CountSource::Field(src.to_string()),
                };
                let (num, den) = match factor.split_once('/') {
                    Some((n, d)) => (
                        parse_int(n).map_err(|e| syntax(line, e))?,
                        parse_int(d).map_err(|e| syntax(line, e))?,
                    ),
                    None => (parse_int(factor).map_err(|e| syntax(line, e))?, 1),
                };
                if den == 0 {
                    return Err(syntax(line, "zero denominator"));
                }
                RelationKind::Count { target: target.to_string(), source, num, den }
            }
            _ => return Err(syntax(line, "expected `count <target> = <source> * <num>[/<den>]`")),
        },
        "equal" => match rest {
            [target, "=", rhs] => {
                let rhs = match parse_int(rhs) {
                    Ok(v) => EqualRhs::Const(v),
                    Err(_) => EqualRhs::Field(rhs.to_string()),
                };
                RelationKind::Equal { target: target.to_string(), rhs }
            }
            _ => return Err(syntax(line, "expected `equal <target> = <field|int>`")),
        },
        "sum" => {
            let le = rest
                .iter()
                .position(|t| *t == "<=")
                .ok_or_else(|| syntax(line, "sum relation needs `<=`"))?;
            let operands: Vec<String> = rest[..le].iter().filter(|t| **t != "+").map(|s| s.to_string()).collect();
            let bound = rest
                .get(le + 1)
                .ok_or_else(|| syntax(line, "missing sum bound"))
                .and_then(|b| parse_int(b).map_err(|e| syntax(line, e)))?;
            if operands.is_empty() {
                return Err(syntax(line, "sum relation needs operands"));
            }
            RelationKind::Sum { operands, bound }
        }
        other => return Err(syntax(line, format!("unknown relation kind `{other}`"))),
    };
    Ok(Relation { name, kind, when })
}

fn check_spec(spec: &ProtocolSpec) -> Result<(), SpecError> {
    let invalid = |m: String| Err(SpecError::Invalid(m));
    let declared: HashMap<&str, &FieldDescriptor> = spec.fields.iter().map(|f| (f.name.as_str(), f)).collect();
    let known = |name: &str| declared.contains_key(name);

    for f in &spec.fields {
        let universe = f.domain.universe();
        if universe.is_empty() {
            return invalid(format!("field `{}` has an empty domain", f.name));
        }
        if let Some(max) = f.max_value() {
            if universe.max().unwrap_or(0) > max {
                return invalid(format!("domain of `{}` exceeds its width", f.name));
            }
        }
        let mut union = ValueSet::empty();
        for (i, c) in f.value_classes.iter().enumerate() {
            if c.set.is_empty() {
                return invalid(format!("class `{}` of `{}` is empty", c.name, f.name));
            }
            if f.value_classes[..i].iter().any(|o| o.name == c.name) {
                return invalid(format!("duplicate class `{}` on `{}`", c.name, f.name));
            }
            if !union.is_disjoint(&c.set) {
                return invalid(format!("classes of `{}` overlap at `{}`", f.name, c.name));
            }
            union = union.union(&c.set);
        }
        if &union != universe {
            return invalid(format!("classes of `{}` cover {union}, domain is {universe}", f.name));
        }
    }

    let roots: Vec<&Segment> = spec.segments.iter().filter(|s| s.parent.is_none()).collect();
    if roots.len() != 1 {
        return invalid(format!("expected exactly one root segment, found {}", roots.len()));
    }
    let mut seg_names = BTreeSet::new();
    for s in &spec.segments {
        if !seg_names.insert(s.name.as_str()) {
            return invalid(format!("duplicate segment `{}`", s.name));
        }
    }
    for s in &spec.segments {
        if let Some(p) = &s.parent {
            if !seg_names.contains(p.as_str()) {
                return invalid(format!("segment `{}` has unknown parent `{p}`", s.name));
            }
        }
        for f in &s.fields {
            if !known(f) {
                return invalid(format!("segment `{}` lists undeclared field `{f}`", s.name));
            }
        }
    }
    // walk every root-to-leaf path: no field twice, selectors reference earlier ints, rest-bytes only last
    let mut covered = BTreeSet::new();
    let mut stack: Vec<(&Segment, Vec<&str>)> = vec![(roots[0], Vec::new())];
    let mut depth_guard = 0usize;
    while let Some((seg, mut path)) = stack.pop() {
        depth_guard += 1;
        if depth_guard > 10_000 {
            return invalid("segment tree contains a cycle".into());
        }
        if let Selector::When(c) = &seg.selector {
            if !path.contains(&c.field.as_str()) || !declared[c.field.as_str()].is_int() {
                return invalid(format!("segment `{}` selects on `{}` which is not an earlier integer field", seg.name, c.field));
            }
        }
        for f in &seg.fields {
            if path.contains(&f.as_str()) {
                return invalid(format!("field `{f}` appears twice on a layout path"));
            }
            path.push(f);
            covered.insert(f.as_str());
        }
        let kids = spec.children(&seg.name);
        if kids.iter().filter(|k| matches!(k.selector, Selector::Otherwise)).count() > 1 {
            return invalid(format!("segment `{}` has more than one `when *` child", seg.name));
        }
        for (i, f) in seg.fields.iter().enumerate() {
            let rest = matches!(declared[f.as_str()].kind, FieldKind::Bytes { fixed_len: None });
            if rest && (i + 1 != seg.fields.len() || !kids.is_empty()) {
                return invalid(format!("variable-length field `{f}` must end a leaf segment"));
            }
        }
        for k in kids {
            stack.push((k, path.clone()));
        }
    }
    for f in &spec.fields {
        if !covered.contains(f.name.as_str()) {
            return invalid(format!("field `{}` is not placed by any segment", f.name));
        }
    }

    for r in &spec.relations {
        for f in r.fields() {
            if !known(f) {
                return invalid(format!("relation `{}` references undeclared field `{f}`", r.name));
            }
        }
        let int_field = |n: &str| declared[n].is_int();
        let ok = match &r.kind {
            RelationKind::Length { target, .. } => declared[target.as_str()].domain.is_length(),
            RelationKind::Count { target, source, .. } => {
                int_field(target)
                    && match source {
                        CountSource::Field(f) => int_field(f),
                        CountSource::LenOf(f) => !int_field(f),
                    }
            }
            RelationKind::Equal { target, rhs } => {
                int_field(target) && matches!(rhs, EqualRhs::Const(_))
                    || matches!(rhs, EqualRhs::Field(f) if int_field(f) && int_field(target))
            }
            RelationKind::Sum { operands, .. } => operands.iter().all(|o| int_field(o)),
        };
        if !ok {
            return invalid(format!("relation `{}` has operands of the wrong kind", r.name));
        }
    }
    for r in &spec.restrictions {
        if !known(&r.field) || r.when.as_ref().is_some_and(|c| !known(&c.field)) {
            return invalid(format!("restriction on `{}` references an undeclared field", r.field));
        }
    }
    for sp in &spec.splice_points {
        if let SplicePoint::After(f) = sp {
            if !known(f) {
                return invalid(format!("splice point after undeclared field `{f}`"));
            }
        }
    }
    for m in &spec.magic {
        if !known(m) || !declared[m.as_str()].is_int() {
            return invalid(format!("magic field `{m}` must be a declared integer field"));
        }
    }
    if let Some(e) = &spec.exception {
        if !known(&e.field) {
            return invalid(format!("exception marker references undeclared field `{}`", e.field));
        }
    }
    Ok(())
}

/// Assigns absolute offsets where the first layout path reaching a field is fixed width up to it.
fn compute_offsets(spec: &mut ProtocolSpec) {
    let mut offsets: HashMap<String, usize> = HashMap::new();
    let mut stack: Vec<(String, Option<usize>)> = vec![(spec.root().name.clone(), Some(0))];
    while let Some((seg_name, mut pos)) = stack.pop() {
        let seg = spec.segment(&seg_name).expect("checked segment").clone();
        for f in &seg.fields {
            let fd = spec.field(f).expect("checked field");
            if let Some(p) = pos {
                offsets.entry(f.clone()).or_insert(p);
            }
            pos = match (pos, &fd.kind) {
                (Some(p), FieldKind::Int { width_bits }) => Some(p + (*width_bits / 8) as usize),
                (Some(p), FieldKind::Bytes { fixed_len: Some(n) }) => Some(p + n),
                _ => None,
            };
        }
        for k in spec.children(&seg_name).iter().map(|k| k.name.clone()).rev().collect::<Vec<_>>() {
            stack.push((k, pos));
        }
    }
    for f in &mut spec.fields {
        f.offset = offsets.get(&f.name).copied();
    }
}
