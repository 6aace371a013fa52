use std::path::PathBuf;

use icsfuzz_core::protocol::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn modbus() -> ProtocolSpec {
    load_spec(fixture("modbus_tcp.spec")).unwrap()
}

const READ_HOLDING: [u8; 12] = [0x00, 0x01, 0x00, 0x00, 0x00, 0x06, 0x01, 0x03, 0x00, 0x00, 0x00, 0x0A];

/// Hand-written MBAP + read-request parser, independent of the schema engine.
fn reference_decode(b: &[u8]) -> Option<[(&'static str, u64); 7]> {
    if b.len() < 12 {
        return None;
    }
    let be16 = |i: usize| u16::from_be_bytes([b[i], b[i + 1]]) as u64;
    Some([
        ("transaction", be16(0)),
        ("protocol", be16(2)),
        ("length", be16(4)),
        ("unit", b[6] as u64),
        ("function_code", b[7] as u64),
        ("start_address", be16(8)),
        ("quantity", be16(10)),
    ])
}

#[test]
fn decode_read_holding_registers_matches_reference() {
    let spec = modbus();
    let frame = decode_frame(&READ_HOLDING, &spec).unwrap();
    let expected = reference_decode(&READ_HOLDING).unwrap();
    assert_eq!(frame.values.len(), expected.len());
    for (name, v) in expected {
        assert_eq!(frame.int(name), Some(v), "{name}");
    }
    assert_eq!(frame.int("quantity"), Some(10));
    assert_eq!(frame.int("length"), Some(6));
    assert_eq!(frame.raw.as_deref(), Some(&READ_HOLDING[..]));
    assert!(validate_frame(&frame, &spec).valid);
}

#[test]
fn empty_input_is_too_short() {
    assert!(matches!(decode_frame(&[], &modbus()), Err(DecodeError::TooShort { .. })));
}

#[test]
fn truncated_mid_field_is_too_short() {
    let err = decode_frame(&READ_HOLDING[..9], &modbus()).unwrap_err();
    assert!(matches!(err, DecodeError::TooShort { ref field, offset: 8, .. } if field == "start_address"));
}

#[test]
fn wrong_protocol_identifier_is_unknown_layout() {
    let mut b = READ_HOLDING;
    b[3] = 7;
    assert!(matches!(decode_frame(&b, &modbus()), Err(DecodeError::UnknownLayout(_))));
}

#[test]
fn altered_length_decodes_but_fails_validation() {
    let spec = modbus();
    let mut b = READ_HOLDING;
    b[5] = 0x09;
    let frame = decode_frame(&b, &spec).unwrap();
    assert_eq!(reference_decode(&b).unwrap()[2], ("length", 9));
    assert_eq!(frame.int("length"), Some(9));
    let report = validate_frame(&frame, &spec);
    assert!(!report.valid);
    assert_eq!(report.violations.len(), 1);
    assert_eq!(report.violations[0].field, "length");
    assert!(report.violations[0].constraint.contains("mismatch"));
}

#[test]
fn extra_payload_flags_only_the_length_relation() {
    let spec = modbus();
    let mut b = READ_HOLDING.to_vec();
    b.extend([0xAB, 0xCD]);
    let frame = decode_frame(&b, &spec).unwrap();
    let report = validate_frame(&frame, &spec);
    assert_eq!(report.violated_relations(), vec!["mbap_length"]);
    assert_eq!(report.violations.len(), 1);
}

#[test]
fn undefined_function_code_reports_enumerated_domain() {
    let spec = modbus();
    let mut b = READ_HOLDING;
    b[7] = 0x5C;
    let frame = decode_frame(&b, &spec).unwrap();
    let report = validate_frame(&frame, &spec);
    assert!(!report.valid);
    assert_eq!(report.violations[0].field, "function_code");
    assert!(report.violations[0].constraint.contains("not in enumerated domain"));
}

#[test]
fn encode_round_trips_the_decoded_frame() {
    let spec = modbus();
    let frame = decode_frame(&READ_HOLDING, &spec).unwrap();
    assert_eq!(encode_frame(&frame, &spec).unwrap(), READ_HOLDING);
}

#[test]
fn encode_without_function_code_is_missing_field() {
    let spec = modbus();
    let mut frame = decode_frame(&READ_HOLDING, &spec).unwrap();
    frame.values.remove("function_code");
    assert_eq!(encode_frame(&frame, &spec), Err(EncodeError::MissingField("function_code".into())));
}

#[test]
fn pinned_length_survives_encoding() {
    let spec = modbus();
    let mut frame = decode_frame(&READ_HOLDING, &spec).unwrap();
    frame.set_int("length", 9);
    frame.pinned.insert("length".into());
    let out = encode_frame(&frame, &spec).unwrap();
    assert_eq!(&out[4..6], &[0x00, 0x09]);
    frame.pinned.clear();
    assert_eq!(&encode_frame(&frame, &spec).unwrap()[4..6], &[0x00, 0x06]);
}

#[test]
fn strict_and_fuzz_width_handling() {
    let spec = modbus();
    let mut frame = decode_frame(&READ_HOLDING, &spec).unwrap();
    frame.set_int("function_code", 0x1FF);
    assert!(matches!(encode_frame(&frame, &spec), Err(EncodeError::ValueOutOfWidth { .. })));
    let enc = encode_frame_with(&frame, &spec, EncodeMode::Fuzz).unwrap();
    assert_eq!(enc.bytes[7], 0xFF);
    assert_eq!(enc.truncated, vec!["function_code".to_string()]);
}

/// Counts `class` lines per field straight from the fixture text.
fn count_combos_from_text(text: &str) -> (usize, usize) {
    let mut fields = Vec::new();
    let mut classes = std::collections::BTreeMap::<String, usize>::new();
    let mut recorded = 0;
    for line in text.lines().map(|l| l.split('#').next().unwrap().trim()) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first() {
            Some(&"field") => fields.push(toks[1].to_string()),
            Some(&"class") => *classes.entry(toks[1].to_string()).or_default() += 1,
            Some(&"combos") => recorded = toks[1].parse().unwrap(),
            _ => {}
        }
    }
    let total = fields.iter().map(|f| classes.get(f).copied().unwrap_or(1)).sum();
    (total, recorded)
}

#[test]
fn modbus_combo_count_matches_fixture_record() {
    let text = std::fs::read_to_string(fixture("modbus_tcp.spec")).unwrap();
    let (counted, recorded) = count_combos_from_text(&text);
    assert_eq!(counted, recorded);
    assert_eq!(counted, 34);
    let combos = enumerate_combos(&modbus());
    assert_eq!(combos.len(), 34);
    let unique: std::collections::BTreeSet<_> = combos.iter().collect();
    assert_eq!(unique.len(), combos.len());
    assert_eq!(combos, enumerate_combos(&modbus()));
    assert_eq!(combos[0], Combo { field: "protocol".into(), class: "modbus".into() });
}

#[test]
fn modbus_spec_shape() {
    let spec = modbus();
    assert_eq!(spec.fields.len(), 10);
    assert_eq!(spec.default_port, 502);
    assert_eq!(spec.field("function_code").unwrap().offset, Some(7));
    assert_eq!(spec.field("transaction").unwrap().offset, Some(0));
    assert_eq!(spec.probes.len(), 2);
    assert!(spec.reply.is_some());
    for probe in &spec.probes {
        assert!(validate_frame(&decode_frame(probe, &spec).unwrap(), &spec).valid);
    }
}

#[test]
fn reply_spec_recognises_exception_and_read_replies() {
    let reply = modbus().reply.unwrap();
    let exc = decode_frame(&[0, 1, 0, 0, 0, 3, 1, 0x83, 0x02], &reply).unwrap();
    assert!(validate_frame(&exc, &reply).valid);
    assert_eq!(exc.int("exception_code"), Some(2));
    let read = decode_frame(&[0, 1, 0, 0, 0, 5, 1, 3, 2, 0x12, 0x34], &reply).unwrap();
    assert!(validate_frame(&read, &reply).valid);
}

#[test]
fn subset_specs_load_and_synthesize() {
    for name in ["s7comm_min.spec", "enip_min.spec"] {
        let spec = load_spec(fixture(name)).unwrap();
        for probe in &spec.probes {
            let f = decode_frame(probe, &spec).unwrap();
            assert!(validate_frame(&f, &spec).valid, "{name}: {:?}", validate_frame(&f, &spec));
        }
        let synth = Synthesizer::new(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let f = synth.frame(&mut rng).expect(name);
            let bytes = encode_frame(&f, &spec).unwrap();
            let back = decode_frame(&bytes, &spec).unwrap();
            assert_eq!(back.values, f.values, "{name}");
            assert!(validate_frame(&back, &spec).valid);
        }
    }
}

#[test]
fn every_reachable_modbus_combo_can_be_synthesized() {
    let spec = modbus();
    let synth = Synthesizer::new(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let missing: Vec<_> = enumerate_combos(&spec)
        .into_iter()
        .filter(|c| synth.frame_with(&mut rng, c).is_none())
        .collect();
    assert_eq!(missing, vec![Combo { field: "length".into(), class: "short".into() }]);
}

proptest! {
    #[test]
    fn synthesized_frames_round_trip_and_validate(seed in any::<u64>()) {
        let spec = modbus();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = Synthesizer::new(&spec).frame(&mut rng).unwrap();
        prop_assert!(validate_frame(&frame, &spec).valid);
        let bytes = encode_frame(&frame, &spec).unwrap();
        let back = decode_frame(&bytes, &spec).unwrap();
        prop_assert_eq!(&back.values, &frame.values);
        prop_assert!(validate_frame(&back, &spec).valid);
    }

    #[test]
    fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
        let spec = modbus();
        if let Ok(frame) = decode_frame(&bytes, &spec) {
            let _ = validate_frame(&frame, &spec);
            let mut pinned = frame.clone();
            pinned.pinned = spec.fields.iter().map(|f| f.name.clone()).collect();
            prop_assert_eq!(encode_frame_with(&pinned, &spec, EncodeMode::Fuzz).unwrap().bytes, bytes);
        }
    }
}
