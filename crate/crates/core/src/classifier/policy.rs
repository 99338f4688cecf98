use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy for `{tool}` lists `{path}` as both intent and volatile")]
    Overlap { tool: String, path: String },
    #[error("policy for `{tool}` has an empty field path")]
    EmptyPath { tool: String },
    #[error("policy file lists `{0}` twice")]
    DuplicateTool(String),
    #[error("policy entry without a tool name")]
    MissingName,
    #[error("cannot read policy file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse policy file: {0}")]
    Parse(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no policy configured for tool `{0}` and no default policy enabled")]
pub struct PolicyMissing(pub String);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownFieldTreatment {
    /// Fields the policy does not mention count as intent (fail closed).
    #[default]
    AsIntent,
    AsVolatile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldClass {
    Intent,
    Volatile,
}

/// Per-tool classification of argument fields.
///
/// Field paths are dot separated (`items.0.amount`); `*` matches any single
/// segment. A path also covers everything nested below it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolPolicy {
    #[serde(alias = "name")]
    pub tool_name: String,
    #[serde(default = "default_true")]
    pub irreversible: bool,
    #[serde(default)]
    pub intent_fields: Vec<String>,
    #[serde(default)]
    pub volatile_fields: Vec<String>,
    #[serde(default)]
    pub credential_fields: Vec<String>,
    /// Paths in the tool's result that carry credentials it issued, e.g.
    /// `structuredContent.token`. They are journaled as digests.
    #[serde(default)]
    pub response_credentials: Vec<String>,
    #[serde(default)]
    pub unknown_field_treatment: UnknownFieldTreatment,
}

fn default_true() -> bool {
    true
}

/// A credential string found in a call's arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credential {
    pub source_field: String,
    pub token: String,
}

impl ToolPolicy {
    pub fn irreversible(tool_name: impl Into<String>) -> Self {
        Self {
            tool_name: tool_name.into(),
            irreversible: true,
            intent_fields: Vec::new(),
            volatile_fields: Vec::new(),
            credential_fields: Vec::new(),
            response_credentials: Vec::new(),
            unknown_field_treatment: UnknownFieldTreatment::AsIntent,
        }
    }

    pub fn reversible(tool_name: impl Into<String>) -> Self {
        Self {
            irreversible: false,
            ..Self::irreversible(tool_name)
        }
    }

    pub fn intent<I, S>(mut self, paths: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.intent_fields.extend(paths.into_iter().map(Into::into));
        self
    }

    pub fn volatile<I, S>(mut self, paths: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.volatile_fields.extend(paths.into_iter().map(Into::into));
        self
    }

    pub fn credentials<I, S>(mut self, paths: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.credential_fields.extend(paths.into_iter().map(Into::into));
        self
    }

    pub fn response_credentials<I, S>(mut self, paths: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.response_credentials.extend(paths.into_iter().map(Into::into));
        self
    }

    pub fn unknown_fields(mut self, treatment: UnknownFieldTreatment) -> Self {
        self.unknown_field_treatment = treatment;
        self
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let all = self
            .intent_fields
            .iter()
            .chain(&self.volatile_fields)
            .chain(&self.credential_fields)
            .chain(&self.response_credentials);
        for path in all {
            if path.is_empty() || path.split('.').any(str::is_empty) {
                return Err(PolicyError::EmptyPath {
                    tool: self.tool_name.clone(),
                });
            }
        }
        if let Some(path) = self
            .intent_fields
            .iter()
            .find(|p| self.volatile_fields.contains(p))
        {
            return Err(PolicyError::Overlap {
                tool: self.tool_name.clone(),
                path: path.clone(),
            });
        }
        Ok(())
    }

    /// Class of a leaf path. The most specific matching pattern wins; a tie
    /// between an intent and a volatile pattern resolves to intent.
    pub fn field_class(&self, segments: &[String]) -> FieldClass {
        let best = |patterns: &[String]| {
            patterns
                .iter()
                .filter(|p| pattern_covers(p, segments))
                .map(|p| p.split('.').count())
                .max()
        };
        match (best(&self.intent_fields), best(&self.volatile_fields)) {
            (Some(i), Some(v)) if v > i => FieldClass::Volatile,
            (Some(_), _) => FieldClass::Intent,
            (None, Some(_)) => FieldClass::Volatile,
            (None, None) => match self.unknown_field_treatment {
                UnknownFieldTreatment::AsIntent => FieldClass::Intent,
                UnknownFieldTreatment::AsVolatile => FieldClass::Volatile,
            },
        }
    }

    /// Non-empty string values found at the credential paths. Containers at a
    /// credential path contribute every string below them.
    pub fn extract_credentials(&self, arguments: &Value) -> Vec<Credential> {
        let mut found = BTreeMap::new();
        for pattern in &self.credential_fields {
            let segments: Vec<&str> = pattern.split('.').collect();
            collect_at(arguments, &segments, &mut Vec::new(), &mut found);
        }
        found
            .into_iter()
            .map(|(source_field, token)| Credential {
                source_field,
                token,
            })
            .collect()
    }
}

impl ToolPolicy {
    /// Copy of `arguments` with every credential string replaced by `digest(token)`.
    pub fn redact_credentials(&self, arguments: &Value, digest: impl Fn(&str) -> String) -> Value {
        let mut out = arguments.clone();
        for pattern in &self.credential_fields {
            let segments: Vec<&str> = pattern.split('.').collect();
            redact_at(&mut out, &segments, &digest);
        }
        out
    }

    /// Copy of a `{"result": ..}` envelope with the issued credentials
    /// replaced by `digest(token)`. Error envelopes are returned unchanged.
    pub fn redact_response(&self, envelope: &Value, digest: impl Fn(&str) -> String) -> Value {
        let mut out = envelope.clone();
        if let Some(result) = out.get_mut("result") {
            for pattern in &self.response_credentials {
                let segments: Vec<&str> = pattern.split('.').collect();
                redact_at(result, &segments, &digest);
            }
        }
        out
    }
}

fn redact_at(value: &mut Value, pattern: &[&str], digest: &dyn Fn(&str) -> String) {
    let Some((head, rest)) = pattern.split_first() else {
        redact_strings(value, digest);
        return;
    };
    match value {
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if *head == "*" || *head == k.as_str() {
                    redact_at(v, rest, digest);
                }
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter_mut().enumerate() {
                if *head == "*" || *head == i.to_string() {
                    redact_at(v, rest, digest);
                }
            }
        }
        _ => {}
    }
}

fn redact_strings(value: &mut Value, digest: &dyn Fn(&str) -> String) {
    match value {
        Value::String(s) if !s.is_empty() => *s = digest(s),
        Value::Array(items) => items.iter_mut().for_each(|v| redact_strings(v, digest)),
        Value::Object(map) => map.values_mut().for_each(|v| redact_strings(v, digest)),
        _ => {}
    }
}

fn pattern_covers(pattern: &str, segments: &[String]) -> bool {
    let parts: Vec<&str> = pattern.split('.').collect();
    parts.len() <= segments.len()
        && parts
            .iter()
            .zip(segments)
            .all(|(p, s)| *p == "*" || *p == s.as_str())
}

fn collect_at(
    value: &Value,
    pattern: &[&str],
    path: &mut Vec<String>,
    found: &mut BTreeMap<String, String>,
) {
    let Some((head, rest)) = pattern.split_first() else {
        collect_strings(value, path, found);
        return;
    };
    let children: Vec<(String, &Value)> = match value {
        Value::Object(map) => map
            .iter()
            .filter(|(k, _)| *head == "*" || *head == k.as_str())
            .map(|(k, v)| (k.clone(), v))
            .collect(),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .filter(|(i, _)| *head == "*" || *head == i.to_string())
            .map(|(i, v)| (i.to_string(), v))
            .collect(),
        _ => Vec::new(),
    };
    for (key, child) in children {
        path.push(key);
        collect_at(child, rest, path, found);
        path.pop();
    }
}

fn collect_strings(value: &Value, path: &mut Vec<String>, found: &mut BTreeMap<String, String>) {
    match value {
        Value::String(s) if !s.is_empty() => {
            found.insert(path.join("."), s.clone());
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                path.push(i.to_string());
                collect_strings(item, path, found);
                path.pop();
            }
        }
        Value::Object(map) => {
            for (k, v) in map {
                path.push(k.clone());
                collect_strings(v, path, found);
                path.pop();
            }
        }
        _ => {}
    }
}

/// Template applied to tools the policy file does not list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultPolicy {
    #[serde(default = "default_true")]
    pub irreversible: bool,
    #[serde(default)]
    pub unknown_field_treatment: UnknownFieldTreatment,
}

impl Default for DefaultPolicy {
    fn default() -> Self {
        Self {
            irreversible: true,
            unknown_field_treatment: UnknownFieldTreatment::AsIntent,
        }
    }
}

#[derive(Debug, Deserialize)]
struct PolicyFile {
    #[serde(default)]
    default: Option<DefaultPolicy>,
    #[serde(default, rename = "tool")]
    tools: Vec<ToolPolicy>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicySet {
    tools: BTreeMap<String, ToolPolicy>,
    default: Option<DefaultPolicy>,
}

impl PolicySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// A set whose unlisted tools resolve to an irreversible, all-intent
    /// policy.
    pub fn fail_closed() -> Self {
        Self {
            tools: BTreeMap::new(),
            default: Some(DefaultPolicy::default()),
        }
    }

    pub fn with_default(mut self, default: Option<DefaultPolicy>) -> Self {
        self.default = default;
        self
    }

    pub fn insert(&mut self, policy: ToolPolicy) -> Result<(), PolicyError> {
        policy.validate()?;
        if self.tools.contains_key(&policy.tool_name) {
            return Err(PolicyError::DuplicateTool(policy.tool_name));
        }
        self.tools.insert(policy.tool_name.clone(), policy);
        Ok(())
    }

    pub fn with(mut self, policy: ToolPolicy) -> Self {
        self.insert(policy).expect("valid policy");
        self
    }

    pub fn get(&self, tool: &str) -> Option<&ToolPolicy> {
        self.tools.get(tool)
    }

    pub fn resolve(&self, tool: &str) -> Result<ToolPolicy, PolicyMissing> {
        if let Some(policy) = self.tools.get(tool) {
            return Ok(policy.clone());
        }
        match &self.default {
            Some(d) => Ok(ToolPolicy {
                irreversible: d.irreversible,
                unknown_field_treatment: d.unknown_field_treatment,
                ..ToolPolicy::irreversible(tool)
            }),
            None => Err(PolicyMissing(tool.to_owned())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolPolicy> {
        self.tools.values()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile = toml::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn from_json_str(text: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile =
            serde_json::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    /// Loads a policy file; `.json` files are read as JSON, anything else as
    /// TOML.
    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    fn from_file(file: PolicyFile) -> Result<Self, PolicyError> {
        let mut set = Self {
            tools: BTreeMap::new(),
            default: file.default,
        };
        for policy in file.tools {
            if policy.tool_name.is_empty() {
                return Err(PolicyError::MissingName);
            }
            set.insert(policy)?;
        }
        Ok(set)
    }
}
