use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use icsfuzz_core::kb::{KnowledgeStore, DEFAULT_CONTEXT_BUDGET, TRUNCATION_MARKER};
use icsfuzz_core::mutation::*;
use icsfuzz_core::protocol::*;
use icsfuzz_core::seed::{seed_id, Seed};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn modbus() -> ProtocolSpec {
    load_spec(fixture("modbus_tcp.spec")).unwrap()
}

const READ_HOLDING: [u8; 12] = [0x00, 0x01, 0x00, 0x00, 0x00, 0x06, 0x01, 0x03, 0x00, 0x00, 0x00, 0x0A];
const WRITE_MULTI: [u8; 17] =
    [0x00, 0x02, 0x00, 0x00, 0x00, 0x0B, 0x01, 0x10, 0x00, 0x10, 0x00, 0x02, 0x04, 0x00, 0x0A, 0x01, 0x02];

fn seed_of(bytes: &[u8], spec: &ProtocolSpec) -> Seed {
    let f = decode_frame(bytes, spec).unwrap();
    let report = validate_frame(&f, spec);
    assert!(report.valid, "{report:?}");
    Seed {
        seed_id: seed_id(&spec.protocol_id, &f.values),
        protocol_id: spec.protocol_id.clone(),
        fields: f.values,
        provenance: "test".into(),
        validation: report,
        rules: Vec::new(),
    }
}

fn synthetic_seed(spec: &ProtocolSpec, n: u64) -> Seed {
    let mut rng = ChaCha8Rng::seed_from_u64(n);
    let frame = Synthesizer::new(spec).frame(&mut rng).unwrap();
    seed_of(&encode_frame(&frame, spec).unwrap(), spec)
}

fn strategy(spec: &ProtocolSpec, rho: f64) -> MutationStrategy {
    MutationStrategy::for_spec(spec, rho, 0.5, 1.0)
}

fn byte_width(spec: &ProtocolSpec, frame: &Frame, name: &str) -> usize {
    match spec.field(name).unwrap().width_bits() {
        Some(w) => (w / 8) as usize,
        None => frame.values[name].as_bytes().unwrap().len(),
    }
}

#[test]
fn field_mutation_count_follows_density() {
    let spec = modbus();
    let seed = seed_of(&READ_HOLDING, &spec);
    // seven integer fields on the read layout, all with positive priority
    for (rho, k) in [(0.1, 1), (0.3, 3), (0.5, 4), (1.0, 7)] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = mutate(MutationKind::Field, &seed, &spec, &strategy(&spec, rho), &EngineConfig::default(), &mut rng)
            .unwrap();
        assert_eq!(m.records.len(), k, "rho {rho}");
        let fields: BTreeSet<_> = m.records.iter().flat_map(MutationRecord::touched).collect();
        assert_eq!(fields.len(), k);
    }
}

#[test]
fn zero_priority_fields_are_never_mutated() {
    let spec = modbus();
    let seed = seed_of(&READ_HOLDING, &spec);
    let mut s = strategy(&spec, 1.0);
    for p in s.field_priorities.values_mut() {
        *p = 0.0;
    }
    s.field_priorities.insert("unit".into(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let m = mutate(MutationKind::Field, &seed, &spec, &s, &EngineConfig::default(), &mut rng).unwrap();
        assert_eq!(m.records.iter().flat_map(MutationRecord::touched).collect::<Vec<_>>(), ["unit"]);
    }
}

#[test]
fn mutated_transaction_lands_in_the_bytes() {
    let spec = modbus();
    let seed = seed_of(&READ_HOLDING, &spec);
    let mut s = strategy(&spec, 0.1);
    for p in s.field_priorities.values_mut() {
        *p = 0.0;
    }
    s.field_priorities.insert("transaction".into(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let m = mutate(MutationKind::Field, &seed, &spec, &s, &EngineConfig::default(), &mut rng).unwrap();
        let MutationRecord::Field { v_prime, .. } = m.records[0] else { panic!() };
        assert_eq!(u16::from_be_bytes([m.bytes[0], m.bytes[1]]) as u64, v_prime);
        assert_eq!(&m.bytes[2..], &READ_HOLDING[2..]);
    }
}

#[test]
fn semantic_mutations_break_exactly_their_relation() {
    let spec = modbus();
    for bytes in [&READ_HOLDING[..], &WRITE_MULTI[..]] {
        let seed = seed_of(bytes, &spec);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut relations = BTreeSet::new();
        for _ in 0..200 {
            let Ok(m) = mutate(MutationKind::Semantic, &seed, &spec, &strategy(&spec, 0.1), &EngineConfig::default(), &mut rng)
            else {
                continue;
            };
            let [MutationRecord::Semantic { relation, .. }] = m.records.as_slice() else { panic!("{:?}", m.records) };
            let decoded = decode_frame(&m.bytes, &spec).unwrap();
            let report = validate_frame(&decoded, &spec);
            assert!(!report.valid);
            assert!(report.violations.iter().all(|v| v.relation.as_deref() == Some(relation.as_str())), "{report:?}");
            relations.insert(relation.clone());
        }
        assert!(!relations.is_empty());
    }
}

#[test]
fn batches_are_reproducible() {
    let spec = modbus();
    let seed = seed_of(&WRITE_MULTI, &spec);
    let run = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        generate_batch(&seed, &spec, &strategy(&spec, 0.2), &EngineConfig::default(), 64, &mut rng)
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn density_tables() {
    let cases = [
        (0.1, 0.5, 1.0, 0.15),
        (0.1, 0.5, 0.0, 0.1),
        (0.1, 0.5, 0.5, 0.125),
        (0.2, 1.0, 1.0, 0.4),
        (0.8, 1.0, 1.0, 1.0),
        (0.001, 0.5, 0.0, DEFAULT_RHO_MIN),
    ];
    for (rho0, alpha, score, want) in cases {
        assert!((density(rho0, alpha, score, DEFAULT_RHO_MIN) - want).abs() < 1e-12, "{rho0} {alpha} {score}");
    }
}

#[test]
fn agent_applies_strategy_between_batches() {
    let spec = modbus();
    let seed = seed_of(&READ_HOLDING, &spec);
    let mut agent =
        MutationAgent::new(1, spec.clone(), strategy(&spec, 0.1), Backend::Deterministic, ChaCha8Rng::seed_from_u64(2));
    agent.add_seed(&seed.wire_data()).unwrap();
    agent.add_seed(&seed.wire_data()).unwrap();
    assert_eq!(agent.corpus.len(), 1);
    let first = agent.run_batch(0, 3);
    assert_eq!(first.iter().map(|c| c.case_id.as_str()).collect::<Vec<_>>(), ["m1-000001", "m1-000002", "m1-000003"]);
    let mut msg = agent.strategy.wire_data();
    msg["feedback_score"] = json!(1.0);
    msg["rho"] = json!(0.5);
    agent.queue_strategy(msg);
    assert_eq!(agent.strategy.rho, 0.1);
    let second = agent.run_batch(0, 1);
    assert!((agent.strategy.rho - 0.15).abs() < 1e-12);
    assert!((second[0].strategy_snapshot.rho - 0.15).abs() < 1e-12);
    assert!(first.iter().all(|c| c.strategy_snapshot.rho == 0.1));
    let wire = second[0].wire_data();
    assert_eq!(wire["hex"], json!(hex::encode(&second[0].bytes)));
}

#[test]
fn random_bytes_backend_respects_lengths() {
    let spec = modbus();
    let seed = seed_of(&READ_HOLDING, &spec);
    let b = Backend::RandomBytes { min_len: 3, max_len: 5 };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = b.generate_batch(&seed, &spec, &strategy(&spec, 0.1), &EngineConfig::default(), 200, &mut rng);
    assert_eq!(p.cases.len(), 200);
    for (records, bytes, fallback) in &p.cases {
        assert!((3..=5).contains(&bytes.len()));
        assert_eq!(records, &vec![MutationRecord::Random { len: bytes.len() }]);
        assert!(!fallback);
    }
}

/// One-shot HTTP server answering every request with `status` and `body`.
/// Request bodies are collected.
fn http_server(status: u16, body: String) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut s) = stream else { break };
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            let body_start = loop {
                let n = s.read(&mut chunk).unwrap_or(0);
                if n == 0 {
                    break None;
                }
                buf.extend_from_slice(&chunk[..n]);
                if let Some(i) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    break Some(i + 4);
                }
            };
            let Some(start) = body_start else { continue };
            let head = String::from_utf8_lossy(&buf[..start]).to_lowercase();
            let len: usize = head
                .lines()
                .find_map(|l| l.strip_prefix("content-length:"))
                .map(|v| v.trim().parse().unwrap())
                .unwrap_or(0);
            while buf.len() < start + len {
                let n = s.read(&mut chunk).unwrap_or(0);
                if n == 0 {
                    break;
                }
                buf.extend_from_slice(&chunk[..n]);
            }
            log.lock().unwrap().push(String::from_utf8_lossy(&buf[start..]).into_owned());
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = s.write_all(reply.as_bytes());
        }
    });
    (url, seen)
}

fn remote(url: String) -> Backend {
    let kb = KnowledgeStore::load(fixture("modbus_kb.jsonl")).unwrap();
    Backend::Remote(RemoteBackend {
        config: RemoteConfig { url, timeout_ms: 2000, retries: 0, ..RemoteConfig::default() },
        store: Arc::new(kb),
    })
}

#[test]
fn remote_cases_are_decoded_and_shortfall_is_filled() {
    let spec = modbus();
    let seed = seed_of(&READ_HOLDING, &spec);
    let mut changed = READ_HOLDING;
    changed[11] = 0x7D;
    let text = format!("1. {}\nnot hex at all\n{}\n", hex::encode(changed), hex::encode(READ_HOLDING));
    let (url, seen) = http_server(200, json!({ "text": text }).to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = remote(url).generate_batch(&seed, &spec, &strategy(&spec, 0.1), &EngineConfig::default(), 3, &mut rng);
    assert_eq!(p.cases.len(), 3);
    // the seed itself carries no mutation and is dropped
    assert_eq!(p.dropped, 1);
    let (records, bytes, fallback) = &p.cases[0];
    assert!(!fallback);
    assert_eq!(bytes, &changed.to_vec());
    assert_eq!(records, &vec![MutationRecord::Field { field: "quantity".into(), width: 16, v: 10, delta: 115, v_prime: 125 }]);
    assert!(p.cases[1..].iter().all(|c| c.2));

    let requests = seen.lock().unwrap();
    let req: serde_json::Value = serde_json::from_str(&requests[0]).unwrap();
    let prompt = req["prompt"].as_str().unwrap();
    let (s1, s2, s3) = (prompt.find("Step 1").unwrap(), prompt.find("Step 2").unwrap(), prompt.find("Step 3").unwrap());
    assert!(s1 < s2 && s2 < s3);
    assert!(prompt.contains(&hex::encode(READ_HOLDING)));
    assert_eq!(req["top_k"], json!(50));
}

#[test]
fn remote_failure_falls_back_to_the_engine() {
    let spec = modbus();
    let seed = seed_of(&READ_HOLDING, &spec);
    let (url, _) = http_server(500, "{}".into());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = remote(url).generate_batch(&seed, &spec, &strategy(&spec, 0.1), &EngineConfig::default(), 4, &mut rng);
    assert_eq!(p.cases.len(), 4);
    assert!(p.cases.iter().all(|c| c.2));

    // nothing listening at all
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = remote(format!("http://127.0.0.1:{port}"))
        .generate_batch(&seed, &spec, &strategy(&spec, 0.1), &EngineConfig::default(), 2, &mut rng);
    assert!(p.cases.len() == 2 && p.cases.iter().all(|c| c.2));
}

#[test]
fn prompt_context_is_budgeted() {
    let spec = modbus();
    let seed = seed_of(&READ_HOLDING, &spec);
    let kb = KnowledgeStore::load(fixture("modbus_kb.jsonl")).unwrap();
    let ctx = icsfuzz_core::kb::Retriever::retrieve(&kb, "protocol rules modbus_tcp function_code 03", 3);
    assert!(!ctx.is_empty());
    let full = build_prompt(&seed, &spec, &ctx, MutationKind::Semantic, 5, DEFAULT_CONTEXT_BUDGET);
    assert!(!full.context_truncated);
    assert!(full.text.contains("Emphasis: semantic"));
    let cut = build_prompt(&seed, &spec, &ctx, MutationKind::Field, 5, 60);
    assert!(cut.context_truncated);
    let block = cut.text.split("### Task").next().unwrap();
    assert!(block.trim_end().ends_with(TRUNCATION_MARKER));
    assert!(block.trim_start_matches("### Context\n").trim_end().chars().count() <= 60);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn field_increments_are_modular(seed_n in any::<u64>(), rng_n in any::<u64>(), rho in 0.01f64..1.0) {
        let spec = modbus();
        let seed = synthetic_seed(&spec, seed_n);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_n);
        let m = mutate(MutationKind::Field, &seed, &spec, &strategy(&spec, rho), &EngineConfig::default(), &mut rng).unwrap();
        for r in &m.records {
            let MutationRecord::Field { field, width, v, delta, v_prime } = r else { panic!() };
            let modulus = 1i128 << width;
            let want = ((*v as i128 + *delta as i128) % modulus + modulus) % modulus;
            prop_assert_eq!(*v_prime as i128, want);
            prop_assert_ne!(v_prime, v);
            prop_assert_eq!(Some(*v), seed.fields[field].as_int());
            prop_assert_eq!(m.frame.int(field), Some(*v_prime));
            prop_assert_eq!(spec.field(field).unwrap().width_bits(), Some(*width));
        }
    }

    #[test]
    fn structural_field_sets_obey_the_set_identity(seed_n in any::<u64>(), rng_n in any::<u64>()) {
        let spec = modbus();
        let seed = synthetic_seed(&spec, seed_n);
        let original = seed.frame(&spec).unwrap();
        let before = encode_frame(&original, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_n);
        let m = mutate(MutationKind::Structural, &seed, &spec, &strategy(&spec, 0.1), &EngineConfig::default(), &mut rng).unwrap();
        let [MutationRecord::Structural { inserted, deleted }] = m.records.as_slice() else { panic!() };
        prop_assert!(!inserted.is_empty() || !deleted.is_empty());

        let live = |f: &Frame| -> BTreeSet<String> {
            f.path.iter().filter(|p| !f.deleted.contains(*p)).cloned().chain(f.inserted.iter().map(|i| i.name.clone())).collect()
        };
        let deleted_set: BTreeSet<String> = deleted.iter().cloned().collect();
        let inserted_set: BTreeSet<String> = inserted.iter().map(|b| b.name.clone()).collect();
        let expected: BTreeSet<String> =
            live(&original).difference(&deleted_set).cloned().collect::<BTreeSet<_>>().union(&inserted_set).cloned().collect();
        prop_assert_eq!(live(&m.frame), expected);
        prop_assert!(deleted_set.is_subset(&live(&original)));
        prop_assert!(inserted_set.is_disjoint(&live(&original)));

        let removed: usize = deleted.iter().map(|d| byte_width(&spec, &original, d)).sum();
        let added: usize = inserted.iter().map(|b| b.len).sum();
        prop_assert_eq!(m.bytes.len() + removed, before.len() + added);
    }

    #[test]
    fn every_batch_case_differs_from_its_seed(seed_n in any::<u64>(), rng_n in any::<u64>()) {
        let spec = modbus();
        let seed = synthetic_seed(&spec, seed_n);
        let bytes = encode_frame(&seed.frame(&spec).unwrap(), &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_n);
        let batch = generate_batch(&seed, &spec, &strategy(&spec, 0.1), &EngineConfig::default(), 16, &mut rng);
        prop_assert_eq!(batch.len(), 16);
        for (records, b) in batch {
            prop_assert!(!records.is_empty());
            prop_assert_ne!(b, bytes.clone());
        }
    }
}
