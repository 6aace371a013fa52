//! Rule store with deterministic keyword-overlap retrieval.
//!
//! Entries are JSON objects, one per line. A query is tokenized the same way
//! as entries; each distinct query term contributes the weight of the best
//! place it appears in an entry (keywords 2, title 1.5, body 1), and the sum
//! is divided by the best possible total, 2 per term.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_THRESHOLD: f64 = 0.85;
pub const DEFAULT_CONTEXT_BUDGET: usize = 2048;
pub const TRUNCATION_MARKER: &str = "[... context truncated ...]";

const KEYWORD_WEIGHT: f64 = 2.0;
const TITLE_WEIGHT: f64 = 1.5;
const BODY_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryKind {
    CommandFormat,
    FieldConstraint,
    VulnerabilityNote,
    AnomalyRecord,
    StrategyRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleEntry {
    pub id: String,
    pub protocol_id: String,
    pub kind: EntryKind,
    pub title: String,
    pub body: String,
    pub keywords: Vec<String>,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub entry: RuleEntry,
    pub score: f64,
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate entry id `{0}`")]
    DuplicateId(String),
    #[error("entry `{0}` has no keywords")]
    NoKeywords(String),
}

/// Anything that can answer ranked rule queries.
pub trait Retriever {
    fn retrieve(&self, query: &str, k: usize) -> Vec<RetrievalResult>;
}

/// Lowercased runs of alphanumerics and underscores.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Default)]
struct Terms {
    keywords: BTreeSet<String>,
    title: BTreeSet<String>,
    body: BTreeSet<String>,
}

impl Terms {
    fn of(e: &RuleEntry) -> Self {
        Terms {
            keywords: e.keywords.iter().flat_map(|k| tokenize(k)).collect(),
            title: tokenize(&e.title).into_iter().collect(),
            body: tokenize(&e.body).into_iter().collect(),
        }
    }

    fn weight(&self, term: &str) -> f64 {
        if self.keywords.contains(term) {
            KEYWORD_WEIGHT
        } else if self.title.contains(term) {
            TITLE_WEIGHT
        } else if self.body.contains(term) {
            BODY_WEIGHT
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeStore {
    entries: Vec<RuleEntry>,
    terms: Vec<Terms>,
    ids: HashMap<String, usize>,
    /// term -> entries mentioning it anywhere
    index: BTreeMap<String, Vec<usize>>,
    path: Option<PathBuf>,
    pub threshold: f64,
}

impl Default for KnowledgeStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl KnowledgeStore {
    pub fn in_memory() -> Self {
        KnowledgeStore {
            entries: Vec::new(),
            terms: Vec::new(),
            ids: HashMap::new(),
            index: BTreeMap::new(),
            path: None,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    /// Loads a JSONL store. Appends made afterwards are written back to `path`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| KbError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut store = Self::parse(&text)?;
        store.path = Some(path.to_path_buf());
        Ok(store)
    }

    pub fn parse(text: &str) -> Result<Self, KbError> {
        let mut store = Self::in_memory();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let entry: RuleEntry =
                serde_json::from_str(line).map_err(|e| KbError::Parse { line: i + 1, message: e.to_string() })?;
            store.insert(entry)?;
        }
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Redirects future appends to another file (the existing entries are not copied).
    pub fn set_path(&mut self, path: Option<PathBuf>) {
        self.path = path;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RuleEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&RuleEntry> {
        self.ids.get(id).map(|&i| &self.entries[i])
    }

    fn insert(&mut self, entry: RuleEntry) -> Result<(), KbError> {
        if self.ids.contains_key(&entry.id) {
            return Err(KbError::DuplicateId(entry.id));
        }
        if entry.keywords.iter().all(|k| tokenize(k).is_empty()) {
            return Err(KbError::NoKeywords(entry.id));
        }
        let idx = self.entries.len();
        let terms = Terms::of(&entry);
        for t in terms.keywords.iter().chain(&terms.title).chain(&terms.body) {
            let slot = self.index.entry(t.clone()).or_default();
            if slot.last() != Some(&idx) {
                slot.push(idx);
            }
        }
        self.ids.insert(entry.id.clone(), idx);
        self.entries.push(entry);
        self.terms.push(terms);
        Ok(())
    }

    /// Adds an entry and, for file-backed stores, appends its line to the file.
    pub fn append(&mut self, entry: RuleEntry) -> Result<(), KbError> {
        if self.ids.contains_key(&entry.id) {
            return Err(KbError::DuplicateId(entry.id));
        }
        let line = serde_json::to_string(&entry).expect("entries serialize");
        self.insert(entry)?;
        if let Some(path) = &self.path {
            let io = |source| KbError::Io { path: path.display().to_string(), source };
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
            writeln!(f, "{line}").map_err(io)?;
        }
        Ok(())
    }

    /// Normalized score of one entry for an already tokenized, deduplicated query.
    fn score(&self, idx: usize, terms: &[String]) -> f64 {
        let got: f64 = terms.iter().map(|t| self.terms[idx].weight(t)).sum();
        got / (KEYWORD_WEIGHT * terms.len() as f64)
    }

    /// Every entry's score for `query`, unfiltered, in store order.
    pub fn score_all(&self, query: &str) -> Vec<(String, f64)> {
        let terms = query_terms(query);
        if terms.is_empty() {
            return self.entries.iter().map(|e| (e.id.clone(), 0.0)).collect();
        }
        (0..self.entries.len()).map(|i| (self.entries[i].id.clone(), self.score(i, &terms))).collect()
    }
}

fn query_terms(query: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    tokenize(query).into_iter().filter(|t| seen.insert(t.clone())).collect()
}

impl Retriever for KnowledgeStore {
    fn retrieve(&self, query: &str, k: usize) -> Vec<RetrievalResult> {
        let terms = query_terms(query);
        if terms.is_empty() || k == 0 {
            return Vec::new();
        }
        let candidates: BTreeSet<usize> =
            terms.iter().filter_map(|t| self.index.get(t)).flatten().copied().collect();
        let mut scored: Vec<(f64, usize)> = candidates
            .into_iter()
            .map(|i| (self.score(i, &terms), i))
            .filter(|(s, _)| *s > 0.0 && *s >= self.threshold)
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("scores are finite")
                .then_with(|| self.entries[a.1].id.cmp(&self.entries[b.1].id))
        });
        scored
            .into_iter()
            .take(k)
            .map(|(score, i)| RetrievalResult { entry: self.entries[i].clone(), score })
            .collect()
    }
}

/// Joins retrieved entries into a prompt context block of at most `budget`
/// characters. Returns the text and whether it had to be cut; a cut text ends
/// with [`TRUNCATION_MARKER`].
pub fn render_context(results: &[RetrievalResult], budget: usize) -> (String, bool) {
    let full: String = results
        .iter()
        .map(|r| format!("[{}] {}\n{}\n", r.entry.id, r.entry.title, r.entry.body))
        .collect();
    if full.chars().count() <= budget {
        return (full, false);
    }
    let keep = budget.saturating_sub(TRUNCATION_MARKER.chars().count() + 1);
    let mut cut: String = full.chars().take(keep).collect();
    cut.push('\n');
    cut.push_str(TRUNCATION_MARKER);
    (cut, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, title: &str, keywords: &[&str]) -> RuleEntry {
        RuleEntry {
            id: id.into(),
            protocol_id: "modbus_tcp".into(),
            kind: EntryKind::CommandFormat,
            title: title.into(),
            body: String::new(),
            keywords: keywords.iter().map(|s| s.to_string()).collect(),
            source: String::new(),
        }
    }

    #[test]
    fn tokenizer_keeps_underscores() {
        assert_eq!(tokenize("Protocol rules: modbus_tcp FC-03"), ["protocol", "rules", "modbus_tcp", "fc", "03"]);
    }

    #[test]
    fn tie_breaks_on_id() {
        let mut s = KnowledgeStore::in_memory();
        s.append(entry("b", "x", &["alpha"])).unwrap();
        s.append(entry("a", "x", &["alpha"])).unwrap();
        let r = s.retrieve("alpha", 1);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].entry.id, "a");
        assert_eq!(r[0].score, 1.0);
    }

    #[test]
    fn weights_by_location() {
        let mut s = KnowledgeStore::in_memory();
        s.threshold = 0.0;
        let mut e = entry("e", "beta", &["alpha"]);
        e.body = "gamma".into();
        s.append(e).unwrap();
        let scores = s.score_all("alpha beta gamma delta");
        assert_eq!(scores[0].1, (2.0 + 1.5 + 1.0) / 8.0);
    }

    #[test]
    fn context_budget_marks_truncation() {
        let mut e = entry("e", "t", &["k"]);
        e.body = "x".repeat(100);
        let r = vec![RetrievalResult { entry: e, score: 1.0 }];
        let (text, cut) = render_context(&r, 40);
        assert!(cut);
        assert!(text.chars().count() <= 40);
        assert!(text.ends_with(TRUNCATION_MARKER));
        let (_, cut) = render_context(&r, 1000);
        assert!(!cut);
    }
}
