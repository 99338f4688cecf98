//! Proxy configuration file (TOML).
//!
//! ```toml
//! journal = "state/journal.log"
//! policies = "policies.toml"
//!
//! [listen]
//! transport = "http"          # or "stdio"
//! addr = "127.0.0.1:7400"
//!
//! [control]
//! addr = "127.0.0.1:7401"
//!
//! [[upstream]]
//! name = "bank"
//! url = "http://127.0.0.1:9100/mcp"   # or: command = ["bank-server", "--stdio"]
//! ```
//!
//! Relative paths are resolved against the configuration file's directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::classifier::AnalyzerEndpoint;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("bad override `{0}` (expected key=value)")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("journal directory {} does not exist", .0.display())]
    MissingJournalDir(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ListenTransport {
    Stdio,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ListenConfig {
    pub transport: ListenTransport,
    #[serde(default)]
    pub addr: Option<String>,
    /// Session id used for the single stdio session.
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ControlConfig {
    #[serde(default = "default_control_addr")]
    pub addr: String,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            addr: default_control_addr(),
        }
    }
}

fn default_control_addr() -> String {
    "127.0.0.1:7401".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct UpstreamConfig {
    pub name: String,
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default)]
    pub command: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct FenceSection {
    #[serde(default = "yes")]
    pub implicit_restore: bool,
    #[serde(default = "default_branch")]
    pub default_branch: String,
    #[serde(default = "yes")]
    pub fsync: bool,
    #[serde(default = "default_upstream_timeout")]
    pub upstream_timeout_ms: u64,
}

impl Default for FenceSection {
    fn default() -> Self {
        Self {
            implicit_restore: true,
            default_branch: default_branch(),
            fsync: true,
            upstream_timeout_ms: default_upstream_timeout(),
        }
    }
}

fn yes() -> bool {
    true
}

fn default_branch() -> String {
    "b0".into()
}

fn default_upstream_timeout() -> u64 {
    10_000
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct FenceConfig {
    pub listen: ListenConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(rename = "upstream")]
    pub upstreams: Vec<UpstreamConfig>,
    pub journal: PathBuf,
    pub policies: PathBuf,
    #[serde(default)]
    pub analyzer: Option<AnalyzerEndpoint>,
    #[serde(default)]
    pub fence: FenceSection,
}

impl FenceConfig {
    /// Reads, overrides, resolves and validates a configuration file.
    /// Overrides are `dotted.key=value`; values parse as TOML when they can
    /// and as plain strings otherwise.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base, overrides)
    }

    pub fn from_toml_str(text: &str, base: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let mut config: FenceConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.journal = base.join(&config.journal);
        config.policies = base.join(&config.policies);
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.upstreams.is_empty() {
            return Err(ConfigError::Invalid("at least one [[upstream]] is required".into()));
        }
        for up in &self.upstreams {
            match (&up.url, &up.command) {
                (Some(_), None) => {}
                (None, Some(cmd)) if !cmd.is_empty() => {}
                _ => {
                    return Err(ConfigError::Invalid(format!(
                        "upstream `{}` needs exactly one of url or command",
                        up.name
                    )))
                }
            }
        }
        if self.listen.transport == ListenTransport::Http && self.listen.addr.is_none() {
            return Err(ConfigError::Invalid("listen.addr is required for the http transport".into()));
        }
        let dir = self
            .journal
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| Path::new("."));
        if !dir.is_dir() {
            return Err(ConfigError::MissingJournalDir(dir.to_path_buf()));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), ConfigError> {
    let (key, raw) = item
        .split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::Override(item.to_owned()))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(item.to_owned()))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
