//! Proxy configuration and the curated recursor pool.
//!
//! The config is a TOML file. Field names and defaults:
//!
//! | field | default |
//! |---|---|
//! | `listen_address` | `127.0.0.1:5353` |
//! | `control_address` | `127.0.0.1:5390` |
//! | `salt` | required, 32 hex chars |
//! | `cache_max_ttl_s` | `300` |
//! | `cache_capacity` | `10000` |
//! | `query_timeout_ms` | `5000` |
//! | `failover_mode` | `"strict"` |
//! | `log_path` | `kresolver-queries.csv` |
//! | `[attribution] t_idle_ms` / `w_max_ms` | `2000` / `30000` |
//!
//! followed by one `[[recursors]]` table per upstream, in pool order.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::attribution::AttributionPolicy;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:5353";
pub const DEFAULT_CONTROL: &str = "127.0.0.1:5390";
pub const DEFAULT_TIMEOUT_MS: u64 = 5000;
pub const DEFAULT_CACHE_MAX_TTL_S: u32 = 300;
pub const DEFAULT_CACHE_CAPACITY: usize = 10_000;
pub const DEFAULT_LOG_PATH: &str = "kresolver-queries.csv";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("config has no salt; rerun with --generate-salt to create and persist one")]
    MissingSalt,
    #[error("recursor pool is empty after removing disabled and filtering recursors")]
    EmptyPool,
    #[error("entropy source unavailable: {0}")]
    Entropy(String),
}

/// Per-user secret mixed into every assignment hash.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Salt(pub [u8; 16]);

impl Salt {
    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Salt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Salt({})", self.to_hex())
    }
}

impl fmt::Display for Salt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Salt {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s.trim())
            .map_err(|e| ConfigError::Validation(format!("salt is not valid hex: {e}")))?;
        let bytes: [u8; 16] = bytes.try_into().map_err(|v: Vec<u8>| {
            ConfigError::Validation(format!("salt must be 16 bytes (32 hex chars), got {}", v.len()))
        })?;
        Ok(Salt(bytes))
    }
}

/// Draws a fresh salt from `rng`.
pub fn generate_salt<R: RngCore + CryptoRng>(rng: &mut R) -> Result<Salt, ConfigError> {
    let mut bytes = [0u8; 16];
    rng.try_fill_bytes(&mut bytes)
        .map_err(|e| ConfigError::Entropy(e.to_string()))?;
    Ok(Salt(bytes))
}

/// Draws a fresh salt from the operating system's entropy source.
pub fn generate_os_salt() -> Result<Salt, ConfigError> {
    generate_salt(&mut rand::rngs::OsRng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum HttpMethod {
    Get,
    #[default]
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FailoverMode {
    /// Never contact a recursor other than the assigned one.
    #[default]
    Strict,
    /// Fall back to the next recursor in the pool, logging the exposure.
    Relaxed,
}

impl fmt::Display for FailoverMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailoverMode::Strict => "strict",
            FailoverMode::Relaxed => "relaxed",
        })
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecursorSpec {
    pub name: String,
    pub url: String,
    #[serde(default)]
    pub method: HttpMethod,
    #[serde(default)]
    pub anycast: bool,
    #[serde(default)]
    pub location: String,
    #[serde(default)]
    pub filtering: bool,
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Static latency metadata (ms) shipped with the sample pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ping_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_median_ms: Option<f64>,
}

impl RecursorSpec {
    pub fn new(name: &str, url: &str) -> Self {
        RecursorSpec {
            name: name.to_string(),
            url: url.to_string(),
            method: HttpMethod::Post,
            anycast: false,
            location: String::new(),
            filtering: false,
            enabled: true,
            ping_ms: None,
            reported_median_ms: None,
        }
    }

    pub fn validate(&self) -> Result<Url, ConfigError> {
        if self.name.trim().is_empty() {
            return Err(ConfigError::Validation("recursor with empty name".into()));
        }
        let url = Url::parse(&self.url).map_err(|e| {
            ConfigError::Validation(format!("recursor {}: bad url {:?}: {e}", self.name, self.url))
        })?;
        if url.scheme() != "https" {
            return Err(ConfigError::Validation(format!(
                "recursor {}: url scheme must be https",
                self.name
            )));
        }
        if url.host_str().is_none_or(str::is_empty) {
            return Err(ConfigError::Validation(format!("recursor {}: url has no host", self.name)));
        }
        Ok(url)
    }
}

/// Ordered pool of recursors. Assignment indices refer to positions here, so
/// the order must never change for a given config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolverPool {
    recursors: Vec<RecursorSpec>,
}

impl ResolverPool {
    pub fn new(recursors: Vec<RecursorSpec>) -> Result<Self, ConfigError> {
        if recursors.is_empty() {
            return Err(ConfigError::EmptyPool);
        }
        check_unique_names(&recursors)?;
        for r in &recursors {
            r.validate()?;
        }
        Ok(ResolverPool { recursors })
    }

    pub fn k(&self) -> usize {
        self.recursors.len()
    }

    pub fn get(&self, index: usize) -> Option<&RecursorSpec> {
        self.recursors.get(index)
    }

    pub fn recursors(&self) -> &[RecursorSpec] {
        &self.recursors
    }
}

fn check_unique_names(recursors: &[RecursorSpec]) -> Result<(), ConfigError> {
    let mut seen = HashSet::new();
    for r in recursors {
        if !seen.insert(r.name.as_str()) {
            return Err(ConfigError::Validation(format!("duplicate recursor name {:?}", r.name)));
        }
    }
    Ok(())
}

/// Keeps enabled, non-filtering recursors in their original order.
pub fn curate_pool(raw: Vec<RecursorSpec>) -> Result<ResolverPool, ConfigError> {
    check_unique_names(&raw)?;
    let kept: Vec<_> = raw
        .into_iter()
        .filter(|r| r.enabled && !r.filtering)
        .collect();
    ResolverPool::new(kept)
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub listen_address: SocketAddr,
    pub control_address: SocketAddr,
    pub pool: ResolverPool,
    pub salt: Salt,
    pub attribution: AttributionPolicy,
    pub cache_max_ttl_s: u32,
    pub cache_capacity: usize,
    pub query_timeout_ms: u64,
    pub failover_mode: FailoverMode,
    pub log_path: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttribution {
    t_idle_ms: Option<u64>,
    w_max_ms: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    listen_address: Option<String>,
    control_address: Option<String>,
    salt: Option<String>,
    cache_max_ttl_s: Option<i64>,
    cache_capacity: Option<usize>,
    query_timeout_ms: Option<i64>,
    failover_mode: Option<FailoverMode>,
    log_path: Option<PathBuf>,
    attribution: Option<RawAttribution>,
    #[serde(default)]
    recursors: Vec<RecursorSpec>,
}

/// How to treat a config without a salt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaltPolicy {
    Require,
    /// Generate a salt and write it back into the config file.
    GenerateIfMissing,
}

pub fn load_config(path: &Path, policy: SaltPolicy) -> Result<ProxyConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match parse_config(&text) {
        Err(ConfigError::MissingSalt) if policy == SaltPolicy::GenerateIfMissing => {
            let salt = generate_os_salt()?;
            persist_salt(path, &text, &salt)?;
            let updated = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            parse_config(&updated)
        }
        other => other,
    }
}

/// Top-level keys must precede tables in TOML, so the salt goes first.
fn persist_salt(path: &Path, text: &str, salt: &Salt) -> Result<(), ConfigError> {
    let updated = format!("salt = \"{}\"\n{text}", salt.to_hex());
    fs::write(path, updated).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_config(text: &str) -> Result<ProxyConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|span| line_col(text, span.start))
            .unwrap_or((0, 0));
        ConfigError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;

    let parse_addr = |field: &str, value: Option<String>, default: &str| {
        let value = value.unwrap_or_else(|| default.to_string());
        value
            .parse::<SocketAddr>()
            .map_err(|e| ConfigError::Validation(format!("{field} {value:?}: {e}")))
    };
    let listen_address = parse_addr("listen_address", raw.listen_address, DEFAULT_LISTEN)?;
    let control_address = parse_addr("control_address", raw.control_address, DEFAULT_CONTROL)?;

    let query_timeout_ms = raw.query_timeout_ms.unwrap_or(DEFAULT_TIMEOUT_MS as i64);
    if query_timeout_ms <= 0 {
        return Err(ConfigError::Validation("query_timeout_ms must be > 0".into()));
    }
    let cache_max_ttl_s = raw.cache_max_ttl_s.unwrap_or(DEFAULT_CACHE_MAX_TTL_S as i64);
    if cache_max_ttl_s < 1 || cache_max_ttl_s > i64::from(u32::MAX) {
        return Err(ConfigError::Validation("cache_max_ttl_s must be >= 1".into()));
    }
    let cache_capacity = raw.cache_capacity.unwrap_or(DEFAULT_CACHE_CAPACITY);
    if cache_capacity == 0 {
        return Err(ConfigError::Validation("cache_capacity must be >= 1".into()));
    }

    let mut attribution = AttributionPolicy::default();
    if let Some(a) = raw.attribution {
        attribution.t_idle_ms = a.t_idle_ms.unwrap_or(attribution.t_idle_ms);
        attribution.w_max_ms = a.w_max_ms.unwrap_or(attribution.w_max_ms);
    }
    attribution
        .validate()
        .map_err(ConfigError::Validation)?;

    if raw.recursors.is_empty() {
        return Err(ConfigError::Validation("no [[recursors]] configured".into()));
    }
    let pool = curate_pool(raw.recursors)?;
    let salt = raw.salt.ok_or(ConfigError::MissingSalt)?.parse()?;

    Ok(ProxyConfig {
        listen_address,
        control_address,
        pool,
        salt,
        attribution,
        cache_max_ttl_s: cache_max_ttl_s as u32,
        cache_capacity,
        query_timeout_ms: query_timeout_ms as u64,
        failover_mode: raw.failover_mode.unwrap_or_default(),
        log_path: raw.log_path.unwrap_or_else(|| PathBuf::from(DEFAULT_LOG_PATH)),
    })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}
