use std::path::PathBuf;

use icsfuzz_core::kb::*;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn entry(id: &str, title: &str, body: &str, keywords: &[&str]) -> RuleEntry {
    RuleEntry {
        id: id.into(),
        protocol_id: "modbus_tcp".into(),
        kind: EntryKind::FieldConstraint,
        title: title.into(),
        body: body.into(),
        keywords: keywords.iter().map(|s| s.to_string()).collect(),
        source: String::new(),
    }
}

#[test]
fn fixture_loads_and_ranks_function_codes() {
    let kb = KnowledgeStore::load(fixture("modbus_kb.jsonl")).unwrap();
    assert_eq!(kb.len(), 27);
    let r = kb.retrieve("protocol rules modbus_tcp function_code 03", 3);
    assert_eq!(r[0].entry.id, "modbus-fc03");
    assert_eq!(r[0].score, 1.0);
    let r = kb.retrieve("field constraint modbus_tcp quantity", 1);
    assert_eq!(r[0].entry.id, "modbus-field-quantity");
    assert!(kb.retrieve("nothing matches this", 5).is_empty());
    assert!(kb.retrieve("", 5).is_empty());
}

#[test]
fn threshold_filters_weak_matches() {
    let mut kb = KnowledgeStore::in_memory();
    kb.append(entry("a", "", "", &["alpha", "beta"])).unwrap();
    // one of two query terms as a keyword: 2 / (2 * 2) = 0.5
    assert!(kb.retrieve("alpha gamma", 5).is_empty());
    kb.threshold = 0.5;
    let r = kb.retrieve("alpha gamma", 5);
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].score, 0.5);
    assert_eq!(DEFAULT_THRESHOLD, 0.85);
}

#[test]
fn score_weights_keywords_over_title_over_body() {
    let mut kb = KnowledgeStore::in_memory();
    kb.threshold = 0.0;
    kb.append(entry("k", "", "", &["alpha"])).unwrap();
    kb.append(entry("t", "alpha", "", &["x"])).unwrap();
    kb.append(entry("b", "", "alpha", &["x"])).unwrap();
    let r = kb.retrieve("alpha", 3);
    let got: Vec<(&str, f64)> = r.iter().map(|x| (x.entry.id.as_str(), x.score)).collect();
    assert_eq!(got, [("k", 1.0), ("t", 0.75), ("b", 0.5)]);
    let all = kb.score_all("alpha");
    assert_eq!(all.len(), 3);
}

#[test]
fn appends_persist_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kb.jsonl");
    std::fs::copy(fixture("modbus_kb.jsonl"), &path).unwrap();
    let mut kb = KnowledgeStore::load(&path).unwrap();
    kb.append(entry("anomaly-000001", "crash on case m0-000001", "length overflow", &["anomaly", "crash"])).unwrap();
    assert!(matches!(kb.append(entry("anomaly-000001", "", "", &["x"])), Err(KbError::DuplicateId(_))));
    let again = KnowledgeStore::load(&path).unwrap();
    assert_eq!(again.len(), 28);
    assert_eq!(again.get("anomaly-000001").unwrap().body, "length overflow");
    assert_eq!(again.retrieve("anomaly crash", 1)[0].entry.id, "anomaly-000001");
}

#[test]
fn malformed_lines_are_reported_with_line_numbers() {
    let good = serde_json::to_string(&entry("a", "t", "b", &["k"])).unwrap();
    let text = format!("{good}\n\n{{not json}}\n");
    assert!(matches!(KnowledgeStore::parse(&text), Err(KbError::Parse { line: 3, .. })));
    let text = format!("{good}\n{good}\n");
    assert!(matches!(KnowledgeStore::parse(&text), Err(KbError::DuplicateId(id)) if id == "a"));
    let bare = serde_json::to_string(&entry("z", "t", "b", &["!!"])).unwrap();
    assert!(matches!(KnowledgeStore::parse(&bare), Err(KbError::NoKeywords(id)) if id == "z"));
    assert!(matches!(KnowledgeStore::load(fixture("missing.jsonl")), Err(KbError::Io { .. })));
}

#[test]
fn context_rendering_respects_the_budget() {
    let kb = KnowledgeStore::load(fixture("modbus_kb.jsonl")).unwrap();
    let r = kb.retrieve("protocol rules modbus_tcp function_code 16", 2);
    let (full, cut) = render_context(&r, DEFAULT_CONTEXT_BUDGET);
    assert!(!cut);
    assert!(full.starts_with("[modbus-fc16] Function Code 16: Write Multiple Registers\n"));
    let (short, cut) = render_context(&r, 80);
    assert!(cut);
    assert!(short.ends_with(TRUNCATION_MARKER));
    assert!(short.chars().count() <= 80);
}

proptest! {
    #[test]
    fn scores_are_normalized_and_ranked(query in "[a-z_0-9 ]{0,40}") {
        let kb = KnowledgeStore::load(fixture("modbus_kb.jsonl")).unwrap();
        for (_, s) in kb.score_all(&query) {
            prop_assert!((0.0..=1.0).contains(&s));
        }
        let r = kb.retrieve(&query, 5);
        prop_assert!(r.len() <= 5);
        prop_assert!(r.windows(2).all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].entry.id < w[1].entry.id)));
        prop_assert!(r.iter().all(|x| x.score >= DEFAULT_THRESHOLD));
    }
}
