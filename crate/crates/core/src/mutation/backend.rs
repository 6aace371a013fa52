use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{generate_batch, EngineConfig, InsertedBlob, MutationRecord, MutationStrategy};
use super::prompt::build_prompt;
use crate::kb::{KnowledgeStore, Retriever, DEFAULT_CONTEXT_BUDGET};
use crate::protocol::{decode_frame, ProtocolSpec};
use crate::seed::{field_query, Seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL; requests go to `{url}/generate`.
    pub url: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub max_tokens: u32,
    pub context_budget: usize,
    pub context_entries: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            url: "http://127.0.0.1:8000".into(),
            timeout_ms: 10_000,
            retries: 1,
            temperature: 0.7,
            top_k: 50,
            top_p: 0.95,
            max_tokens: 2048,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            context_entries: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    pub config: RemoteConfig,
    pub store: Arc<KnowledgeStore>,
}

/// Where test cases come from.
#[derive(Debug, Clone)]
pub enum Backend {
    Deterministic,
    Remote(RemoteBackend),
    /// Uniform random byte strings; the comparison baseline.
    RandomBytes { min_len: usize, max_len: usize },
}

/// Cases as (records, bytes, fallback), plus remote outputs that were dropped.
#[derive(Debug, Clone, Default)]
pub struct Produced {
    pub cases: Vec<(Vec<MutationRecord>, Vec<u8>, bool)>,
    pub dropped: u64,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Deterministic => "deterministic",
            Backend::Remote(_) => "remote",
            Backend::RandomBytes { .. } => "random-bytes",
        }
    }

    pub fn generate_batch(
        &self,
        seed: &Seed,
        spec: &ProtocolSpec,
        strategy: &MutationStrategy,
        cfg: &EngineConfig,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Produced {
        match self {
            Backend::Deterministic => Produced {
                cases: generate_batch(seed, spec, strategy, cfg, n, rng).into_iter().map(|(r, b)| (r, b, false)).collect(),
                dropped: 0,
            },
            Backend::RandomBytes { min_len, max_len } => {
                let cases = (0..n)
                    .map(|_| {
                        let len = rng.gen_range(*min_len.max(&1)..=*max_len.max(min_len));
                        let mut b = vec![0u8; len];
                        rng.fill_bytes(&mut b);
                        (vec![MutationRecord::Random { len }], b, false)
                    })
                    .collect();
                Produced { cases, dropped: 0 }
            }
            Backend::Remote(remote) => remote.generate(seed, spec, strategy, cfg, n, rng),
        }
    }
}

impl RemoteBackend {
    fn request(&self, prompt: &str) -> Result<String, String> {
        let c = &self.config;
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_millis(c.timeout_ms)).build();
        let url = format!("{}/generate", c.url.trim_end_matches('/'));
        let body = json!({
            "prompt": prompt,
            "temperature": c.temperature,
            "top_k": c.top_k,
            "top_p": c.top_p,
            "max_tokens": c.max_tokens,
        });
        let mut last = String::new();
        for _ in 0..=c.retries {
            match agent.post(&url).send_json(body.clone()) {
                Ok(resp) => {
                    let v: serde_json::Value = resp.into_json().map_err(|e| e.to_string())?;
                    return v["text"].as_str().map(str::to_string).ok_or_else(|| "response has no `text`".to_string());
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(last)
    }

    fn generate(
        &self,
        seed: &Seed,
        spec: &ProtocolSpec,
        strategy: &MutationStrategy,
        cfg: &EngineConfig,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Produced {
        let focus = strategy.direction_weights.pick(rng);
        let context = match seed.fields.get("function_code") {
            Some(v) => self.store.retrieve(&field_query(spec, "function_code", v), self.config.context_entries),
            None => self.store.retrieve(&format!("protocol rules {}", spec.protocol_id), self.config.context_entries),
        };
        let prompt = build_prompt(seed, spec, &context, focus, n, self.config.context_budget);
        if prompt.context_truncated {
            tracing::warn!(seed = %seed.seed_id, "prompt context truncated at the budget");
        }
        let mut produced = Produced::default();
        match self.request(&prompt.text) {
            Ok(text) => {
                for line in text.lines() {
                    if produced.cases.len() == n {
                        break;
                    }
                    let Some(bytes) = hex_token(line) else { continue };
                    match records_against_seed(seed, spec, &bytes) {
                        Some(records) => produced.cases.push((records, bytes, false)),
                        None => produced.dropped += 1,
                    }
                }
            }
            Err(e) => tracing::warn!(error = %e, "remote backend unavailable, using the deterministic engine"),
        }
        if produced.cases.len() < n {
            let rest = generate_batch(seed, spec, strategy, cfg, n - produced.cases.len(), rng);
            produced.cases.extend(rest.into_iter().map(|(r, b)| (r, b, true)));
        }
        produced
    }
}

/// The longest even-length hex run on a line.
fn hex_token(line: &str) -> Option<Vec<u8>> {
    line.split(|c: char| !c.is_ascii_hexdigit())
        .filter(|t| t.len() >= 2)
        .max_by_key(|t| t.len())
        .and_then(|t| hex::decode(&t[..t.len() & !1]).ok())
}

/// Mutation records that explain `bytes` relative to the seed, or `None` when
/// the bytes do not decode or equal the seed.
fn records_against_seed(seed: &Seed, spec: &ProtocolSpec, bytes: &[u8]) -> Option<Vec<MutationRecord>> {
    let decoded = decode_frame(bytes, spec).ok()?;
    let mut records = Vec::new();
    for fd in &spec.fields {
        let (Some(width), Some(v), Some(v_prime)) = (
            fd.width_bits(),
            seed.fields.get(&fd.name).and_then(|x| x.as_int()),
            decoded.int(&fd.name),
        ) else {
            continue;
        };
        if v != v_prime {
            let delta = if width >= 63 { v_prime.wrapping_sub(v) as i64 } else { v_prime as i64 - v as i64 };
            records.push(MutationRecord::Field { field: fd.name.clone(), width, v, delta, v_prime });
        }
    }
    if !decoded.trailing.is_empty() {
        records.push(MutationRecord::Structural {
            inserted: vec![InsertedBlob { name: "ins0".into(), at: "end".into(), len: decoded.trailing.len() }],
            deleted: Vec::new(),
        });
    }
    (!records.is_empty()).then_some(records)
}
