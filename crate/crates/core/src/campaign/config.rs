use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::TcpPorts;
use crate::feedback::FeedbackConfig;
use crate::harness::{SimulatorConfig, TargetEndpoint};
use crate::mutation::{DirectionWeights, EngineConfig, RemoteConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("referenced path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Virtual,
    System,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Deterministic,
    Remote,
    RandomBytes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub remote: RemoteConfig,
    pub random_min_len: usize,
    pub random_max_len: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig { kind: BackendKind::Deterministic, remote: RemoteConfig::default(), random_min_len: 1, random_max_len: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub rho0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub direction_weights: DirectionWeights,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig { rho0: 0.1, alpha: 0.5, beta: 1.0, direction_weights: DirectionWeights::default() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusTransport {
    #[default]
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusConfig {
    pub transport: BusTransport,
    pub host: String,
    pub ports: TcpPorts,
    pub capacity: usize,
    pub heartbeat_interval_ms: u64,
    pub failure_timeout_ms: u64,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            transport: BusTransport::Inproc,
            host: "127.0.0.1".into(),
            ports: TcpPorts::default(),
            capacity: crate::bus::DEFAULT_BUFFER_CAPACITY,
            heartbeat_interval_ms: 5_000,
            failure_timeout_ms: 15_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSection {
    pub enabled: bool,
    /// Restart the simulator whenever a probe finds it down.
    pub restart_on_crash: bool,
    #[serde(flatten)]
    pub config: SimulatorConfig,
}

impl Default for SimulatorSection {
    fn default() -> Self {
        SimulatorSection { enabled: false, restart_on_crash: true, config: SimulatorConfig::default() }
    }
}

/// Per-cycle budget: a case count, or time on the campaign clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleBudget {
    Cases(u64),
    DurationMs(u64),
}

/// Stops an agent's heartbeats and work after a number of executed cases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KillConfig {
    pub agent: String,
    pub after_cases: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub name: String,
    pub protocol_id: String,
    pub specs: Vec<PathBuf>,
    pub knowledge_base: Option<PathBuf>,
    pub captures: Vec<PathBuf>,
    /// Synthesize seeds for combos the captures miss.
    pub augment: bool,
    /// Extra synthetic seeds drawn without a combo target.
    pub synthetic_seeds: usize,
    /// No output files when unset.
    pub output_dir: Option<PathBuf>,
    pub master_seed: u64,
    pub cycles: u32,
    pub budget: CycleBudget,
    pub batch_size: usize,
    pub mutation_agents: u32,
    pub clock: ClockMode,
    pub strategy: StrategyConfig,
    pub engine: EngineConfig,
    pub feedback: FeedbackConfig,
    pub backend: BackendConfig,
    pub target: TargetEndpoint,
    pub simulator: SimulatorSection,
    pub bus: BusConfig,
    pub kill: Option<KillConfig>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            name: "campaign".into(),
            protocol_id: "modbus_tcp".into(),
            specs: Vec::new(),
            knowledge_base: None,
            captures: Vec::new(),
            augment: true,
            synthetic_seeds: 0,
            output_dir: None,
            master_seed: 0,
            cycles: 3,
            budget: CycleBudget::Cases(3000),
            batch_size: 32,
            mutation_agents: 2,
            clock: ClockMode::Virtual,
            strategy: StrategyConfig::default(),
            engine: EngineConfig::default(),
            feedback: FeedbackConfig::default(),
            backend: BackendConfig::default(),
            target: TargetEndpoint::default(),
            simulator: SimulatorSection::default(),
            bus: BusConfig::default(),
            kill: None,
        }
    }
}

impl CampaignConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads, resolves relative paths against the file's directory and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        // absolute, so a copy written elsewhere still points at the same files
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.specs.iter_mut().for_each(fix);
        self.captures.iter_mut().for_each(fix);
        if let Some(p) = self.knowledge_base.as_mut() {
            fix(p);
        }
        if let Some(p) = self.output_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.cycles == 0 {
            return bad("cycles must be at least 1");
        }
        if matches!(self.budget, CycleBudget::Cases(0) | CycleBudget::DurationMs(0)) {
            return bad("the cycle budget must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.mutation_agents == 0 {
            return bad("at least one mutation agent is needed");
        }
        if self.specs.is_empty() {
            return bad("no protocol specs listed");
        }
        if !self.strategy.direction_weights.is_valid() {
            return bad("direction weights must be non-negative and not all zero");
        }
        if self.bus.failure_timeout_ms <= self.bus.heartbeat_interval_ms {
            return bad("failure_timeout_ms must exceed heartbeat_interval_ms");
        }
        if self.backend.random_min_len == 0 || self.backend.random_min_len > self.backend.random_max_len {
            return bad("random_min_len must be in 1..=random_max_len");
        }
        for p in self.specs.iter().chain(&self.captures).chain(&self.knowledge_base) {
            if !p.exists() {
                return Err(ConfigError::MissingPath(p.clone()));
            }
        }
        if let Some(k) = &self.kill {
            let known = (0..self.mutation_agents).any(|i| k.agent == format!("mutation-{i}"));
            if !known {
                return Err(ConfigError::Invalid(format!("kill target `{}` is not a mutation agent", k.agent)));
            }
        }
        Ok(())
    }
}
