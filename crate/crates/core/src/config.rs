//! Pipeline configuration: hyperparameters, sampling settings and backend
//! endpoints. Loaded from TOML with `LGIR_*` environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::BackendRole;

pub const DEFAULT_TAU: f64 = 0.15;
pub const DEFAULT_K_VERIFY: usize = 20;
pub const DEFAULT_ALPHA_EVALUATE: usize = 3;
pub const DEFAULT_IN_CONTEXT_EXAMPLES: usize = 5;
pub const DEFAULT_TOP_N: usize = 50;

/// Where a chat round takes its reference description from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRefMode {
    /// Previous round's comprehensive synthesis.
    #[default]
    Synthesis,
    /// Caption of the previous round's top-1 image.
    Top1Caption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    /// Base URL, or `mock` for the built-in deterministic backend.
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl BackendEndpoint {
    pub fn mock() -> Self {
        Self {
            url: "mock".into(),
            model: None,
        }
    }

    pub fn is_mock(&self) -> bool {
        self.url == "mock" || self.url.starts_with("mock://")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    /// In-flight request cap per role.
    pub concurrency: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            timeout_ms: 120_000,
            max_retries: 3,
            backoff_ms: 200,
            concurrency: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Weight of the text-to-text path in dual-path score fusion.
    pub tau: f64,
    /// Candidates verified against propositions.
    pub k_verify: usize,
    /// Maximum candidates shown to the evaluator.
    pub alpha_evaluate: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub in_context_examples: usize,
    /// Entries returned to clients.
    pub top_n: usize,
    pub chat_ref: ChatRefMode,
    pub cache_dir: Option<PathBuf>,
    pub session_dir: Option<PathBuf>,
    pub gateway: GatewayConfig,
    pub backends: BTreeMap<BackendRole, BackendEndpoint>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            k_verify: DEFAULT_K_VERIFY,
            alpha_evaluate: DEFAULT_ALPHA_EVALUATE,
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 1024,
            in_context_examples: DEFAULT_IN_CONTEXT_EXAMPLES,
            top_n: DEFAULT_TOP_N,
            chat_ref: ChatRefMode::default(),
            cache_dir: None,
            session_dir: None,
            gateway: GatewayConfig::default(),
            backends: BTreeMap::new(),
        }
    }
}

impl PipelineConfig {
    /// Defaults with every role pointed at the built-in mock.
    pub fn all_mock() -> Self {
        let mut cfg = Self::default();
        for role in BackendRole::ALL {
            cfg.backends.insert(role, BackendEndpoint::mock());
        }
        cfg
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file, applies process environment overrides, validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `LGIR_*` overrides. Unknown `LGIR_` keys are ignored.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        for (key, value) in vars {
            let Some(rest) = key.strip_prefix("LGIR_") else {
                continue;
            };
            match rest {
                "TAU" => self.tau = num(&key, &value)?,
                "K_VERIFY" => self.k_verify = num(&key, &value)?,
                "ALPHA_EVALUATE" => self.alpha_evaluate = num(&key, &value)?,
                "TEMPERATURE" => self.temperature = num(&key, &value)?,
                "TOP_P" => self.top_p = num(&key, &value)?,
                "CACHE_DIR" => self.cache_dir = Some(PathBuf::from(value)),
                "SESSION_DIR" => self.session_dir = Some(PathBuf::from(value)),
                _ => {
                    let Some(role) = rest
                        .strip_prefix("BACKEND_")
                        .and_then(|r| r.strip_suffix("_URL"))
                    else {
                        continue;
                    };
                    let role = BackendRole::from_env_name(role)
                        .ok_or_else(|| Error::Config(format!("unknown backend role in {key}")))?;
                    let model = self.backends.get(&role).and_then(|b| b.model.clone());
                    self.backends.insert(role, BackendEndpoint { url: value, model });
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.k_verify == 0 {
            return Err(Error::Config("k_verify must be positive".into()));
        }
        if self.alpha_evaluate == 0 {
            return Err(Error::Config("alpha_evaluate must be positive".into()));
        }
        if self.alpha_evaluate > self.k_verify {
            return Err(Error::Config(format!(
                "alpha_evaluate ({}) must not exceed k_verify ({})",
                self.alpha_evaluate, self.k_verify
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must lie in (0, 1]".into()));
        }
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be positive".into()));
        }
        if self.gateway.concurrency == 0 {
            return Err(Error::Config("gateway.concurrency must be positive".into()));
        }
        Ok(())
    }
}
