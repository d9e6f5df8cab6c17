//! Layered configuration: built-in defaults, then a TOML file, then
//! `FLLM_<SECTION>__<KEY>` environment variables.

use std::fmt;
use std::path::{Path, PathBuf};

use fllm_core::catalog::SplitMode;
use fllm_core::embedstore::{HttpEmbedderConfig, MockEmbedder};
use fllm_core::inference::{PromptConfig, PromptTemplates};
use fllm_core::RetryPolicy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "FLLM_";

/// One invalid setting, named by its dotted path (`backend.base_url`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path} is not valid TOML: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl ConfigError {
    fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }

    pub fn fields(&self) -> &[FieldError] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    #[default]
    Oracle,
    Random,
    Http,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Scripted => "scripted",
            BackendKind::Oracle => "oracle",
            BackendKind::Random => "random",
            BackendKind::Http => "http",
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(BackendKind::Scripted),
            "oracle" => Ok(BackendKind::Oracle),
            "random" => Ok(BackendKind::Random),
            "http" => Ok(BackendKind::Http),
            other => Err(format!("unknown backend '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Catalog directory (flat or Polyvore layout).
    pub catalog_root: Option<PathBuf>,
    /// Persisted vector index.
    pub index: Option<PathBuf>,
    /// Knowledge documents (JSONL) folded into the index at build time.
    pub knowledge: Option<PathBuf>,
    pub mode: SplitMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    pub model: String,
    pub max_tokens: u32,
    /// Seed of the random backend.
    pub seed: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
    /// Replies of the scripted backend, in order.
    pub replies: Vec<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        BackendConfig {
            kind: BackendKind::default(),
            base_url: None,
            api_key: None,
            model: "fashion-llm".into(),
            max_tokens: 256,
            seed: 0,
            max_retries: retry.max_retries,
            backoff_ms: retry.backoff_ms,
            timeout_ms: retry.timeout_ms,
            replies: Vec::new(),
        }
    }
}

impl BackendConfig {
    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            backoff_ms: self.backoff_ms,
            timeout_ms: self.timeout_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dims: usize,
    pub seed: u64,
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    pub model: String,
    pub batch_size: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        EmbedderConfig {
            kind: EmbedderKind::default(),
            dims: MockEmbedder::DEFAULT_DIMS,
            seed: MockEmbedder::DEFAULT_SEED,
            base_url: None,
            api_key: None,
            model: "text-embedding-small".into(),
            batch_size: 64,
            max_retries: retry.max_retries,
            backoff_ms: retry.backoff_ms,
            timeout_ms: retry.timeout_ms,
        }
    }
}

impl EmbedderConfig {
    /// Settings for the HTTP embedder; `None` unless `kind = "http"` with a URL.
    pub fn http(&self) -> Option<HttpEmbedderConfig> {
        let base_url = self.base_url.clone()?;
        (self.kind == EmbedderKind::Http).then(|| HttpEmbedderConfig {
            base_url,
            model: self.model.clone(),
            dims: self.dims,
            api_key: self.api_key.clone(),
            batch_size: self.batch_size,
            retry: RetryPolicy {
                max_retries: self.max_retries,
                backoff_ms: self.backoff_ms,
                timeout_ms: self.timeout_ms,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_per_path: usize,
    /// Fused documents handed to the prompt.
    pub k_final: usize,
    /// LLM-generated question paths; 0 disables them.
    pub n_questions: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k_per_path: 10,
            k_final: 5,
            n_questions: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub page_size: usize,
    /// Requests handled at once; further requests wait.
    pub max_concurrency: usize,
    pub default_k: usize,
    /// On backend failure, answer 502 with retrieval-only recommendations.
    pub fallback_on_backend_error: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            page_size: 50,
            max_concurrency: 8,
            default_k: 10,
            fallback_on_backend_error: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub token_budget: usize,
    pub templates: PromptTemplates,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection {
            token_budget: 2048,
            templates: PromptTemplates::default(),
        }
    }
}

impl PromptSection {
    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig::with_token_budget(self.templates.clone(), self.token_budget)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub paths: PathsConfig,
    pub backend: BackendConfig,
    pub embedder: EmbedderConfig,
    pub retrieval: RetrievalConfig,
    pub service: ServiceConfig,
    pub prompt: PromptSection,
}

pub const MAX_K: usize = 50;

impl Config {
    /// Loads `path` (if any) over the defaults and applies `FLLM_*`
    /// overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load_with_env(path, std::env::vars())
    }

    /// Like [`Config::load`] with an explicit environment. Precedence is
    /// environment over file over defaults. The result is not validated.
    pub fn load_with_env(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError::Syntax {
                    path: p.to_path_buf(),
                    message: e.message().to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        let defaults = toml::Table::try_from(Config::default()).expect("defaults serialize");
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.contains("__"))
            .collect();
        overrides.sort();
        for (var, raw) in overrides {
            apply_env(&mut table, &defaults, &var, &raw)?;
        }
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let field = e.path().to_string();
            ConfigError::field(field, e.into_inner().message().to_string())
        })
    }

    /// Field-level checks; every problem is reported.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, message: &str| {
            errs.push(FieldError {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.paths.catalog_root.is_none() {
            bad("paths.catalog_root", "required");
        }
        if self.paths.index.is_none() {
            bad("paths.index", "required");
        }
        if self.backend.kind == BackendKind::Http && self.backend.base_url.is_none() {
            bad("backend.base_url", "required when backend.kind = \"http\"");
        }
        if self.backend.max_tokens == 0 {
            bad("backend.max_tokens", "must be at least 1");
        }
        if self.embedder.dims == 0 {
            bad("embedder.dims", "must be at least 1");
        }
        if self.embedder.kind == EmbedderKind::Http && self.embedder.base_url.is_none() {
            bad("embedder.base_url", "required when embedder.kind = \"http\"");
        }
        if self.embedder.batch_size == 0 {
            bad("embedder.batch_size", "must be at least 1");
        }
        if self.retrieval.k_per_path == 0 {
            bad("retrieval.k_per_path", "must be at least 1");
        }
        if self.retrieval.k_final == 0 {
            bad("retrieval.k_final", "must be at least 1");
        }
        if self.service.page_size == 0 {
            bad("service.page_size", "must be at least 1");
        }
        if self.service.max_concurrency == 0 {
            bad("service.max_concurrency", "must be at least 1");
        }
        if !(1..=MAX_K).contains(&self.service.default_k) {
            bad("service.default_k", "must be between 1 and 50");
        }
        if self.service.bind.parse::<std::net::SocketAddr>().is_err() {
            bad("service.bind", "must be an address such as 127.0.0.1:8080");
        }
        if self.prompt.token_budget == 0 {
            bad("prompt.token_budget", "must be at least 1");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn catalog_root(&self) -> &Path {
        self.paths.catalog_root.as_deref().unwrap_or(Path::new("."))
    }

    pub fn index_path(&self) -> &Path {
        self.paths.index.as_deref().unwrap_or(Path::new("index.bin"))
    }
}

/// `FLLM_BACKEND__BASE_URL=...` sets `backend.base_url`. Values parse as TOML
/// scalars unless the setting is a string (or has no default), in which case
/// the raw text is kept.
fn apply_env(
    table: &mut toml::Table,
    defaults: &toml::Table,
    var: &str,
    raw: &str,
) -> Result<(), ConfigError> {
    let env_err = |message: String| ConfigError::Env {
        var: var.to_string(),
        message,
    };
    let rest = &var[ENV_PREFIX.len()..];
    let (section, key) = rest
        .split_once("__")
        .map(|(s, k)| (s.to_ascii_lowercase(), k.to_ascii_lowercase()))
        .filter(|(s, k)| !s.is_empty() && !k.is_empty())
        .ok_or_else(|| env_err("expected FLLM_<SECTION>__<KEY>".into()))?;
    let Some(default_section) = defaults.get(&section).and_then(|v| v.as_table()) else {
        return Err(env_err(format!("unknown section '{section}'")));
    };
    let value = match default_section.get(&key) {
        Some(toml::Value::String(_)) | None => toml::Value::String(raw.to_string()),
        Some(_) => parse_scalar(raw),
    };
    let entry = table
        .entry(section.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(ConfigError::field(section, "must be a table"));
    };
    sec.insert(key, value);
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
