//! Campaign ledger and the evaluation measures computed from it.
//!
//! The ledger is an append-only JSON-lines log. Every metric is a pure
//! function of it, so a finished (or interrupted) campaign can be re-scored
//! with `fuzz report`.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::feedback::{Class, Liveness, Observation, Outcome, Reason};
use crate::harness::crash_ledger;
use crate::mutation::MutationRecord;
use crate::protocol::{combos_of_frame, enumerate_combos, Combo, FieldValue, Frame, ProtocolSpec};

pub use report::{render_report, ReportFormat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LedgerRecord {
    Campaign {
        name: String,
        protocol_id: String,
        backend: String,
        master_seed: u64,
    },
    Cycle {
        index: u32,
        at_ms: u64,
    },
    Seed {
        seed_id: String,
        protocol_id: String,
        fields: BTreeMap<String, FieldValue>,
        provenance: String,
    },
    Case {
        case_id: String,
        seed_id: String,
        agent: String,
        #[serde(with = "crate::protocol::hex_bytes")]
        bytes: Vec<u8>,
        mutations: Vec<MutationRecord>,
        #[serde(default)]
        fallback: bool,
    },
    Observation {
        observation: Observation,
        class: Class,
        reason: Reason,
        score: f64,
    },
    Crash {
        opened_by: String,
        detail: String,
        restarted: bool,
    },
    Strategy {
        after_case: String,
        rho: f64,
        feedback_score: f64,
    },
    Control {
        event: String,
        data: Value,
    },
    End {
        completed: bool,
    },
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("observation for unknown case `{0}`")]
    DanglingObservation(String),
    #[error("cycle {found} follows cycle {previous}")]
    CycleOrder { previous: u32, found: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("the ledger holds no test cases")]
    EmptyCampaign,
    #[error("cycle {0} does not exist in the ledger")]
    UnknownCycle(u32),
    #[error("no mutated values recorded for field `{0}`")]
    NoObservations(String),
    #[error("spec `{0}` declares no value classes")]
    NoCombos(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    pub records: Vec<LedgerRecord>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: LedgerRecord) {
        self.records.push(r);
    }

    pub fn parse(text: &str) -> Result<Ledger, LedgerError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(line).map_err(|e| LedgerError::Parse { line: i + 1, message: e.to_string() })?;
            records.push(r);
        }
        Ok(Ledger { records })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Ledger, LedgerError> {
        let mut text = String::new();
        for line in BufReader::new(File::open(path)?).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
    }

    /// Structural checks: observations follow their case, cycles increase.
    pub fn check(&self) -> Result<(), LedgerError> {
        let mut cases = BTreeSet::new();
        let mut last_cycle: Option<u32> = None;
        for r in &self.records {
            match r {
                LedgerRecord::Case { case_id, .. } => {
                    cases.insert(case_id.as_str());
                }
                LedgerRecord::Observation { observation, .. } if !cases.contains(observation.case_id.as_str()) => {
                    return Err(LedgerError::DanglingObservation(observation.case_id.clone()));
                }
                LedgerRecord::Cycle { index, .. } => {
                    if let Some(p) = last_cycle.filter(|p| index <= p) {
                        return Err(LedgerError::CycleOrder { previous: p, found: *index });
                    }
                    last_cycle = Some(*index);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Records paired with the cycle they fall in (0 before the first boundary).
    pub fn with_cycles(&self) -> impl Iterator<Item = (u32, &LedgerRecord)> {
        let mut cycle = 0;
        self.records.iter().map(move |r| {
            if let LedgerRecord::Cycle { index, .. } = r {
                cycle = *index;
            }
            (cycle, r)
        })
    }

    pub fn cycles(&self) -> Vec<u32> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LedgerRecord::Cycle { index, .. } => Some(*index),
                _ => None,
            })
            .collect()
    }

    pub fn protocol_id(&self) -> Option<&str> {
        self.records.iter().find_map(|r| match r {
            LedgerRecord::Campaign { protocol_id, .. } => Some(protocol_id.as_str()),
            _ => None,
        })
    }

    pub fn cases(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.records.iter().filter_map(|r| match r {
            LedgerRecord::Case { case_id, bytes, .. } => Some((case_id.as_str(), bytes.as_slice())),
            _ => None,
        })
    }

    pub fn observations(&self) -> impl Iterator<Item = (&Observation, Class, Reason)> {
        self.records.iter().filter_map(|r| match r {
            LedgerRecord::Observation { observation, class, reason, .. } => Some((observation, *class, *reason)),
            _ => None,
        })
    }

    pub fn completed(&self) -> bool {
        self.records.iter().any(|r| matches!(r, LedgerRecord::End { completed: true }))
    }
}

/// Append-only ledger file. Each record is one line.
#[derive(Debug)]
pub struct LedgerWriter {
    out: BufWriter<File>,
}

impl LedgerWriter {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        let f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(LedgerWriter { out: BufWriter::new(f) })
    }

    pub fn append(&mut self, r: &LedgerRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// A case counts as passed when the target answered at protocol level,
/// exception replies included. Silence, resets, refusals and replies on a
/// degraded or crashed target do not.
pub fn is_passed(obs: &Observation, class: Class) -> bool {
    matches!(obs.outcome, Outcome::Reply { .. }) && class != Class::Critical
}

fn passed_cases(ledger: &Ledger) -> BTreeSet<&str> {
    let cases: BTreeSet<&str> = ledger.cases().map(|(id, _)| id).collect();
    ledger
        .observations()
        .filter(|(o, c, _)| is_passed(o, *c))
        .map(|(o, _, _)| o.case_id.as_str())
        .filter(|id| cases.contains(id))
        .collect()
}

/// Passed cases over generated cases.
pub fn tcpr(ledger: &Ledger) -> Result<Ratio<u64>, MetricsError> {
    let total = ledger.cases().count() as u64;
    if total == 0 {
        return Err(MetricsError::EmptyCampaign);
    }
    Ok(Ratio::new(passed_cases(ledger).len() as u64, total))
}

/// Crash episodes, each tagged with the cycle of the observation that opened it.
pub fn crash_episodes(ledger: &Ledger) -> Vec<(u32, String)> {
    let seq: Vec<(u32, &str, Liveness)> = ledger
        .with_cycles()
        .filter_map(|(c, r)| match r {
            LedgerRecord::Observation { observation, .. } => {
                Some((c, observation.case_id.as_str(), observation.liveness_after))
            }
            _ => None,
        })
        .collect();
    let cycle_of: BTreeMap<&str, u32> = seq.iter().map(|(c, id, _)| (*id, *c)).collect();
    crash_ledger(seq.iter().map(|(_, id, l)| (*id, *l)))
        .into_iter()
        .map(|e| (cycle_of[e.opened_by.as_str()], e.opened_by))
        .collect()
}

/// Crash events opened during `cycle`.
pub fn etn(ledger: &Ledger, cycle: u32) -> Result<u64, MetricsError> {
    if !ledger.cycles().contains(&cycle) {
        return Err(MetricsError::UnknownCycle(cycle));
    }
    Ok(crash_episodes(ledger).iter().filter(|(c, _)| *c == cycle).count() as u64)
}

/// Distinct (field, class) combos present in the seed corpus for `spec`.
pub fn covered_combos(ledger: &Ledger, spec: &ProtocolSpec) -> BTreeSet<Combo> {
    ledger
        .records
        .iter()
        .filter_map(|r| match r {
            LedgerRecord::Seed { protocol_id, fields, .. } if *protocol_id == spec.protocol_id => Some(fields),
            _ => None,
        })
        .flat_map(|fields| {
            let frame = Frame { spec_id: spec.protocol_id.clone(), values: fields.clone(), ..Default::default() };
            combos_of_frame(spec, &frame)
        })
        .collect()
}

pub fn coverage(ledger: &Ledger, spec: &ProtocolSpec) -> Result<Ratio<u64>, MetricsError> {
    let total = enumerate_combos(spec).len() as u64;
    if total == 0 {
        return Err(MetricsError::NoCombos(spec.protocol_id.clone()));
    }
    Ok(Ratio::new(covered_combos(ledger, spec).len() as u64, total))
}

/// Mutated values (`v'`) per field, from field-mutation records.
pub fn mutated_values(ledger: &Ledger) -> BTreeMap<String, BTreeMap<u64, u64>> {
    let mut out: BTreeMap<String, BTreeMap<u64, u64>> = BTreeMap::new();
    for r in &ledger.records {
        let LedgerRecord::Case { mutations, .. } = r else { continue };
        for m in mutations {
            if let MutationRecord::Field { field, v_prime, .. } = m {
                *out.entry(field.clone()).or_default().entry(*v_prime).or_default() += 1;
            }
        }
    }
    out
}

/// Shannon entropy in bits of an empirical distribution given by counts.
pub fn shannon(counts: impl IntoIterator<Item = u64>) -> f64 {
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

pub fn entropy(ledger: &Ledger, field: &str) -> Result<f64, MetricsError> {
    mutated_values(ledger)
        .get(field)
        .map(|d| shannon(d.values().copied()))
        .ok_or_else(|| MetricsError::NoObservations(field.to_string()))
}

pub fn entropy_per_field(ledger: &Ledger) -> BTreeMap<String, f64> {
    mutated_values(ledger).into_iter().map(|(f, d)| (f, shannon(d.into_values()))).collect()
}

pub fn macro_average(per_field: &BTreeMap<String, f64>) -> Option<f64> {
    (!per_field.is_empty()).then(|| per_field.values().sum::<f64>() / per_field.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub generated: u64,
    pub observed: u64,
    pub passed: u64,
    /// Observed cases that did not pass.
    pub errors: u64,
    /// Cases the remote backend could not supply.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fallback: u64,
}

fn is_zero(n: &u64) -> bool {
    *n == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleCount {
    pub cycle: u32,
    pub crashes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub covered: u64,
    pub total: u64,
}

impl CoverageSummary {
    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.covered, self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub protocol_id: String,
    pub tcpr: Ratio<u64>,
    pub totals: Totals,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub etn_per_cycle: Vec<CycleCount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageSummary>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub entropy_per_field: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_macro: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reasons: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub partial: bool,
}

impl MetricReport {
    pub fn etn_total(&self) -> u64 {
        self.etn_per_cycle.iter().map(|c| c.crashes).sum()
    }
}

/// Scores a ledger. Coverage needs the spec and is omitted without one.
pub fn compute_report(ledger: &Ledger, spec: Option<&ProtocolSpec>) -> Result<MetricReport, MetricsError> {
    let tcpr = tcpr(ledger)?;
    let generated = ledger.cases().count() as u64;
    let observed: BTreeSet<&str> = ledger.observations().map(|(o, _, _)| o.case_id.as_str()).collect();
    let passed = passed_cases(ledger).len() as u64;
    let fallback = ledger
        .records
        .iter()
        .filter(|r| matches!(r, LedgerRecord::Case { fallback: true, .. }))
        .count() as u64;
    let episodes = crash_episodes(ledger);
    let etn_per_cycle = ledger
        .cycles()
        .into_iter()
        .map(|cycle| CycleCount { cycle, crashes: episodes.iter().filter(|(c, _)| *c == cycle).count() as u64 })
        .collect();
    let coverage = spec.map(|s| CoverageSummary {
        covered: covered_combos(ledger, s).len() as u64,
        total: enumerate_combos(s).len() as u64,
    });
    let entropy_per_field = entropy_per_field(ledger);
    let mut reasons = BTreeMap::new();
    for (_, _, reason) in ledger.observations() {
        *reasons.entry(reason.to_string()).or_insert(0) += 1;
    }
    Ok(MetricReport {
        protocol_id: ledger.protocol_id().or(spec.map(|s| s.protocol_id.as_str())).unwrap_or_default().to_string(),
        tcpr,
        totals: Totals { generated, observed: observed.len() as u64, passed, errors: observed.len() as u64 - passed, fallback },
        etn_per_cycle,
        coverage: coverage.filter(|c| c.total > 0),
        entropy_macro: macro_average(&entropy_per_field),
        entropy_per_field,
        reasons,
        partial: !ledger.completed(),
    })
}

/// Ratio as a percentage with two decimals, rounded half up at four decimals
/// of the ratio: 9059/10334 gives "87.66%".
pub fn percent(r: Ratio<u64>) -> String {
    let (n, d) = (*r.numer() as u128, *r.denom() as u128);
    let bp = (n * 20_000 + d) / (2 * d);
    format!("{}.{:02}%", bp / 100, bp % 100)
}
