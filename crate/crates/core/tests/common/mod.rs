#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use icsfuzz_core::feedback::{Class, Liveness, Observation, Outcome, Reason};
use icsfuzz_core::metrics::*;
use icsfuzz_core::mutation::MutationRecord;
use icsfuzz_core::protocol::{load_spec, FieldValue, ProtocolSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn modbus() -> ProtocolSpec {
    load_spec(fixture("modbus_tcp.spec")).unwrap()
}

pub const FIELDS: [(&str, u32); 8] = [
    ("protocol", 16),
    ("function_code", 8),
    ("start_address", 16),
    ("quantity", 16),
    ("value", 16),
    ("length", 16),
    ("unit", 8),
    ("transaction", 16),
];

/// Class table read straight from the spec text: (field, class) -> inclusive ranges.
pub fn class_table() -> Vec<(String, String, Vec<(u64, u64)>)> {
    let text = std::fs::read_to_string(fixture("modbus_tcp.spec")).unwrap();
    let num = |s: &str| match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16).unwrap(),
        None => s.parse().unwrap(),
    };
    text.lines()
        .filter_map(|l| l.strip_prefix("class "))
        .map(|rest| {
            let mut it = rest.split_whitespace();
            let field = it.next().unwrap().to_string();
            let class = it.next().unwrap().to_string();
            let ranges = it
                .next()
                .unwrap()
                .split(',')
                .map(|r| match r.split_once("..") {
                    Some((a, b)) => (num(a), num(b)),
                    None => (num(r), num(r)),
                })
                .collect();
            (field, class, ranges)
        })
        .collect()
}

pub fn oracle_coverage(ledger: &Ledger) -> (u64, u64) {
    let table = class_table();
    let seeds: Vec<&BTreeMap<String, FieldValue>> = ledger
        .records
        .iter()
        .filter_map(|r| match r {
            LedgerRecord::Seed { fields, .. } => Some(fields),
            _ => None,
        })
        .collect();
    let mut covered = 0;
    for (field, _, ranges) in &table {
        let hit = seeds.iter().any(|s| {
            let key = match s.get(field) {
                Some(FieldValue::Int(v)) => *v,
                Some(FieldValue::Bytes(b)) => b.len() as u64,
                None => return false,
            };
            // the first class listed for a field wins, as in the spec
            let first = table.iter().find(|(f, _, rs)| f == field && rs.iter().any(|(a, b)| (*a..=*b).contains(&key)));
            first.is_some_and(|(_, _, rs)| std::ptr::eq(rs, ranges))
        });
        covered += hit as u64;
    }
    (covered, table.len() as u64)
}

pub fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn oracle_tcpr(ledger: &Ledger) -> (u64, u64) {
    let mut total = 0u64;
    let mut ok: BTreeSet<String> = BTreeSet::new();
    for r in &ledger.records {
        match r {
            LedgerRecord::Case { .. } => total += 1,
            LedgerRecord::Observation { observation, class, .. } => {
                let reply = matches!(observation.outcome, Outcome::Reply { .. });
                if reply && *class != Class::Critical {
                    ok.insert(observation.case_id.clone());
                }
            }
            _ => {}
        }
    }
    let n = ok.len() as u64;
    let g = gcd(n, total).max(1);
    (n / g, total / g)
}

pub fn oracle_entropy(ledger: &Ledger) -> BTreeMap<String, f64> {
    let mut counts: HashMap<String, HashMap<u64, f64>> = HashMap::new();
    for r in &ledger.records {
        if let LedgerRecord::Case { mutations, .. } = r {
            for m in mutations {
                if let MutationRecord::Field { field, v_prime, .. } = m {
                    *counts.entry(field.clone()).or_default().entry(*v_prime).or_default() += 1.0;
                }
            }
        }
    }
    counts
        .into_iter()
        .map(|(f, c)| {
            let n: f64 = c.values().sum();
            let h = c.values().map(|k| (k / n) * (n / k).ln()).sum::<f64>() / std::f64::consts::LN_2;
            (f, h)
        })
        .collect()
}

pub fn oracle_etn(ledger: &Ledger) -> BTreeMap<u32, u64> {
    let mut cycle = 0;
    let mut out: BTreeMap<u32, u64> = BTreeMap::new();
    let mut down = false;
    for r in &ledger.records {
        match r {
            LedgerRecord::Cycle { index, .. } => {
                cycle = *index;
                out.entry(cycle).or_default();
            }
            LedgerRecord::Observation { observation, .. } => match observation.liveness_after {
                Liveness::Down => {
                    if !down {
                        *out.entry(cycle).or_default() += 1;
                    }
                    down = true;
                }
                Liveness::Alive => down = false,
                Liveness::Degraded => {}
            },
            _ => {}
        }
    }
    out
}

pub fn random_ledger(seed: u64) -> Ledger {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = Ledger::new();
    l.push(LedgerRecord::Campaign {
        name: "t".into(),
        protocol_id: "modbus_tcp".into(),
        backend: "deterministic".into(),
        master_seed: seed,
    });
    for s in 0..rng.gen_range(1..12) {
        let mut fields = BTreeMap::new();
        for (f, w) in FIELDS {
            if rng.gen_bool(0.8) {
                let v = match rng.gen_range(0..3) {
                    0 => rng.gen_range(0..4),
                    1 => rng.gen_range(0..300),
                    _ => rng.gen_range(0..(1u64 << w)),
                };
                fields.insert(f.to_string(), FieldValue::Int(v));
            }
        }
        if rng.gen_bool(0.5) {
            let n = rng.gen_range(1..40);
            fields.insert("data".into(), FieldValue::Bytes(vec![0xAB; n]));
        }
        l.push(LedgerRecord::Seed {
            seed_id: format!("s-{s}"),
            protocol_id: "modbus_tcp".into(),
            fields,
            provenance: "test".into(),
        });
    }
    let mut case = 0;
    for cycle in 1..=rng.gen_range(1..4u32) {
        l.push(LedgerRecord::Cycle { index: cycle, at_ms: cycle as u64 * 1000 });
        for _ in 0..rng.gen_range(1..120) {
            case += 1;
            let id = format!("c{case}");
            let mut mutations = Vec::new();
            for _ in 0..rng.gen_range(0..3) {
                let (f, w) = FIELDS[rng.gen_range(0..FIELDS.len())];
                let v = rng.gen_range(0..20);
                let delta = rng.gen_range(1..6);
                mutations.push(MutationRecord::Field { field: f.into(), width: w, v, delta, v_prime: v + delta as u64 });
            }
            l.push(LedgerRecord::Case {
                case_id: id.clone(),
                seed_id: "s-0".into(),
                agent: "mutation-0".into(),
                bytes: vec![case as u8],
                mutations,
                fallback: false,
            });
            if rng.gen_bool(0.9) {
                let outcome = match rng.gen_range(0..4) {
                    0 | 1 => Outcome::Reply { bytes: vec![1, 2] },
                    2 => Outcome::Timeout,
                    _ => Outcome::ConnectionReset,
                };
                let liveness = [Liveness::Alive, Liveness::Alive, Liveness::Degraded, Liveness::Down][rng.gen_range(0..4)];
                let class = [Class::Normal, Class::Abnormal, Class::Critical][rng.gen_range(0..3)];
                l.push(LedgerRecord::Observation {
                    observation: Observation {
                        case_id: id,
                        outcome,
                        response_time_ms: rng.gen_range(0..500),
                        liveness_after: liveness,
                        resource_signal: 0.0,
                    },
                    class,
                    reason: Reason::Normal,
                    score: 0.0,
                });
            }
        }
    }
    if rng.gen_bool(0.7) {
        l.push(LedgerRecord::End { completed: true });
    }
    l
}
