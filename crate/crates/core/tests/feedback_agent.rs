use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use icsfuzz_core::bus::{InProcBus, Topic, Transport};
use icsfuzz_core::clock::VirtualClock;
use icsfuzz_core::feedback::*;
use icsfuzz_core::kb::{EntryKind, KnowledgeStore, Retriever};
use icsfuzz_core::mutation::{MutationRecord, MutationStrategy};
use icsfuzz_core::protocol::{load_spec, ProtocolSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn modbus() -> ProtocolSpec {
    load_spec(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/modbus_tcp.spec")).unwrap()
}

const READ_REPLY: [u8; 13] = [0x00, 0x01, 0x00, 0x00, 0x00, 0x07, 0x01, 0x03, 0x04, 0x00, 0x0A, 0x00, 0x0B];
const EXCEPTION_REPLY: [u8; 9] = [0x00, 0x01, 0x00, 0x00, 0x00, 0x03, 0x01, 0x83, 0x02];

fn obs(outcome: Outcome, ms: u64, l: Liveness) -> Observation {
    Observation { case_id: "c1".into(), outcome, response_time_ms: ms, liveness_after: l, resource_signal: 0.0 }
}

fn reply(b: &[u8]) -> Outcome {
    Outcome::Reply { bytes: b.to_vec() }
}

#[test]
fn classification_table() {
    let spec = modbus();
    let cases = [
        (obs(reply(&READ_REPLY), 1, Liveness::Alive), Class::Normal, Reason::Normal),
        (obs(reply(&READ_REPLY), 250, Liveness::Alive), Class::Abnormal, Reason::Delay),
        (obs(reply(&EXCEPTION_REPLY), 1, Liveness::Alive), Class::Abnormal, Reason::ExceptionCode),
        (obs(reply(&READ_REPLY[..10]), 1, Liveness::Alive), Class::Abnormal, Reason::MalformedReply),
        (obs(reply(&READ_REPLY), 1, Liveness::Degraded), Class::Critical, Reason::Degraded),
        (obs(Outcome::Timeout, 2000, Liveness::Alive), Class::Critical, Reason::Timeout),
        (obs(Outcome::ConnectionReset, 1, Liveness::Alive), Class::Critical, Reason::ConnectionReset),
        (obs(Outcome::ConnectionRefused, 1, Liveness::Degraded), Class::Critical, Reason::ConnectionRefused),
        (obs(reply(&READ_REPLY), 1, Liveness::Down), Class::Critical, Reason::Crash),
        (obs(Outcome::Timeout, 2000, Liveness::Down), Class::Critical, Reason::Crash),
    ];
    for (o, class, reason) in cases {
        let c = classify_response(&o, &spec, 200);
        assert_eq!((c.class, c.reason), (class, reason), "{o:?}");
    }
}

#[test]
fn reply_with_wrong_byte_count_is_malformed() {
    let mut bad = READ_REPLY;
    bad[8] = 0x06;
    let c = classify_response(&obs(reply(&bad), 1, Liveness::Alive), &modbus(), 200);
    assert_eq!(c.reason, Reason::MalformedReply);
}

/// S in ten-thousandths from hundredths inputs, with plain integers.
fn oracle_s(e: i64, t: i64, r: i64, w: (i64, i64, i64)) -> i64 {
    w.0 * e + w.1 * t + w.2 * r
}

#[test]
fn weighted_score_is_bit_exact_over_1000_tuples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..1000 {
        let (e, t, r) = (rng.gen_range(0..=1000i64), rng.gen_range(0..=1000i64), rng.gen_range(0..=1000i64));
        let w = (rng.gen_range(0..=300i64), rng.gen_range(0..=300i64), rng.gen_range(0..=300i64));
        let weights = Weights::new(w.0 as f64 / 100.0, w.1 as f64 / 100.0, w.2 as f64 / 100.0);
        assert_eq!(weights.w1, Fixed::from_hundredths(w.0));
        let s = weighted(Fixed::from_hundredths(e), Fixed::from_hundredths(t), Fixed::from_hundredths(r), weights);
        assert_eq!(s.s, Fixed(oracle_s(e, t, r, w)), "{e} {t} {r} {w:?}");
    }
}

#[test]
fn severity_components() {
    let cfg = FeedbackConfig::default();
    let spec = modbus();
    let mut o = obs(Outcome::Timeout, 2000, Liveness::Alive);
    o.resource_signal = 0.42;
    let s = severity(&o, &classify_response(&o, &spec, 200), &cfg);
    assert_eq!((s.e, s.t, s.r), (Fixed::from_int(8), Fixed::from_int(8), Fixed::from_hundredths(420)));
    assert_eq!(s.s, Fixed::from_hundredths(2020));

    let o = obs(reply(&READ_REPLY), 250, Liveness::Alive);
    let s = severity(&o, &classify_response(&o, &spec, 200), &cfg);
    assert_eq!((s.e, s.t, s.r, s.s), (Fixed::from_int(3), Fixed::from_int(3), Fixed::ZERO, Fixed::from_int(6)));

    let o = obs(reply(&READ_REPLY), 1, Liveness::Alive);
    assert_eq!(severity(&o, &classify_response(&o, &spec, 200), &cfg).s, Fixed::ZERO);
    assert_eq!(Fixed::from_hundredths(2020).to_string(), "20.20");
}

fn score_of(s: Fixed) -> SeverityScore {
    SeverityScore { e: s, t: Fixed::ZERO, r: Fixed::ZERO, s, weights: Weights::default() }
}

#[test]
fn density_from_severity_table() {
    let spec = modbus();
    let cfg = FeedbackConfig::default();
    let base: BTreeMap<String, f64> = spec.fields.iter().map(|f| (f.name.clone(), f.priority)).collect();
    let strat = MutationStrategy::for_spec(&spec, 0.1, 0.5, 1.0);
    let s_max = cfg.s_max();
    let h = History::new(10);
    let none = BTreeSet::new();
    for (s, want) in [(s_max, 0.2), (Fixed::ZERO, 0.1), (Fixed(s_max.0 / 2), 0.15), (Fixed(s_max.0 / 4), 0.125)] {
        let next = adjust_strategy(&strat, &score_of(s), s_max, &h, &none, &base, &cfg);
        assert!((next.rho - want).abs() < 1e-12, "S={s} rho={}", next.rho);
    }
    let mut steep = strat.clone();
    steep.rho0 = 0.8;
    let next = adjust_strategy(&steep, &score_of(s_max), s_max, &h, &none, &base, &cfg);
    assert_eq!(next.rho, 1.0);
}

#[test]
fn damping_needs_frequent_anomalies_and_low_stability() {
    let spec = modbus();
    let cfg = FeedbackConfig::default();
    let base: BTreeMap<String, f64> = spec.fields.iter().map(|f| (f.name.clone(), f.priority)).collect();
    let strat = MutationStrategy::for_spec(&spec, 0.1, 0.5, 1.0);
    let s_max = cfg.s_max();
    let none = BTreeSet::new();

    let mut unstable = History::new(10);
    for i in 0..10 {
        unstable.push(true, i < 3);
    }
    let next = adjust_strategy(&strat, &score_of(s_max), s_max, &unstable, &none, &base, &cfg);
    assert!((next.rho - 0.1).abs() < 1e-12);

    // frequent anomalies on a stable target: no damping
    let mut stable = History::new(10);
    for _ in 0..10 {
        stable.push(true, true);
    }
    let next = adjust_strategy(&strat, &score_of(s_max), s_max, &stable, &none, &base, &cfg);
    assert!((next.rho - 0.2).abs() < 1e-12);

    // exactly at the thresholds: no damping either
    let mut edge = History::new(10);
    for i in 0..10 {
        edge.push(i < 5, i < 5);
    }
    let next = adjust_strategy(&strat, &score_of(s_max), s_max, &edge, &none, &base, &cfg);
    assert!((next.rho - 0.2).abs() < 1e-12);
}

#[test]
fn implicated_fields_are_boosted_up_to_the_cap() {
    let spec = modbus();
    let cfg = FeedbackConfig::default();
    let base: BTreeMap<String, f64> = spec.fields.iter().map(|f| (f.name.clone(), f.priority)).collect();
    let mut strat = MutationStrategy::for_spec(&spec, 0.1, 0.5, 1.0);
    let implicated: BTreeSet<String> = ["unit".to_string()].into();
    let h = History::new(10);
    let s = score_of(Fixed::from_int(5));
    let b = base["unit"];
    for want in [2.0 * b, 4.0 * b, 4.0 * b] {
        strat = adjust_strategy(&strat, &s, cfg.s_max(), &h, &implicated, &base, &cfg);
        assert!((strat.priority("unit") - want).abs() < 1e-12);
    }
    assert_eq!(strat.priority("quantity"), base["quantity"]);
    let calm = adjust_strategy(&strat, &score_of(Fixed::ZERO), cfg.s_max(), &h, &implicated, &base, &cfg);
    assert_eq!(calm.field_priorities, strat.field_priorities);
}

#[test]
fn agent_publishes_strategy_and_records_anomalies() {
    let spec = modbus();
    let bus = InProcBus::new(VirtualClock::shared(), 100);
    let strat_sub = bus.subscribe(Topic::Strategy, "mutation-0").unwrap();
    let mut store = KnowledgeStore::in_memory();
    let mut agent = FeedbackAgent::new(spec.clone(), MutationStrategy::for_spec(&spec, 0.1, 0.5, 1.0), FeedbackConfig::default());

    let rec = MutationRecord::Field { field: "quantity".into(), width: 16, v: 10, delta: 3000, v_prime: 3010 };
    agent.note_case(&json!({
        "case_id": "c1", "seed_id": "s-1", "protocol_id": "modbus_tcp",
        "mutations": [rec], "hex": "000100000006010300000bc2",
    }));
    let a = agent.observe(&obs(reply(&EXCEPTION_REPLY), 1, Liveness::Alive), &mut store, &bus).unwrap();
    assert_eq!(a.class.reason, Reason::ExceptionCode);
    assert!(a.strategy_changed);
    let msg = strat_sub.try_recv().unwrap();
    assert!((msg.data["rho"].as_f64().unwrap() - 0.1 * (1.0 + 4.0 / 28.0)).abs() < 1e-12);
    assert_eq!(msg.data["field_priorities"]["quantity"], json!(2.0 * spec.field("quantity").unwrap().priority));

    let id = a.anomaly_id.unwrap();
    let entry = store.get(&id).unwrap();
    assert_eq!(entry.kind, EntryKind::AnomalyRecord);
    for k in ["anomaly", "exception", "quantity", "field", "fc03"] {
        assert!(entry.keywords.iter().any(|x| x == k), "{k} in {:?}", entry.keywords);
    }
    assert_eq!(store.retrieve("anomaly modbus_tcp quantity fc03", 1)[0].entry.id, id);

    // a normal reply leaves the store alone
    let mut o = obs(reply(&READ_REPLY), 1, Liveness::Alive);
    o.case_id = "c2".into();
    let a = agent.observe(&o, &mut store, &bus).unwrap();
    assert!(a.anomaly_id.is_none());
    assert_eq!(store.len(), 1);
}

#[test]
fn anomaly_ids_skip_existing_entries() {
    let spec = modbus();
    let bus = InProcBus::new(VirtualClock::shared(), 100);
    let mut store = KnowledgeStore::in_memory();
    let mut agent = FeedbackAgent::new(spec.clone(), MutationStrategy::for_spec(&spec, 0.1, 0.5, 1.0), FeedbackConfig::default());
    let first = agent.observe(&obs(Outcome::Timeout, 2000, Liveness::Alive), &mut store, &bus).unwrap();
    let mut fresh = FeedbackAgent::new(spec.clone(), MutationStrategy::for_spec(&spec, 0.1, 0.5, 1.0), FeedbackConfig::default());
    let second = fresh.observe(&obs(Outcome::Timeout, 2000, Liveness::Alive), &mut store, &bus).unwrap();
    assert_eq!(first.anomaly_id.as_deref(), Some("anomaly-000001"));
    assert_eq!(second.anomaly_id.as_deref(), Some("anomaly-000002"));
}
