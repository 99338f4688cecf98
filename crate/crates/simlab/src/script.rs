//! Scenario configuration: the scripted tool-call sequence, where the
//! checkpoint sits, the crash and rollback schedule, re-synthesis
//! parameters, and the expected server-side results.
//!
//! String arguments may hold placeholders:
//!
//! * `$uuid`: a fresh reference id on every generation
//! * `$text:<key>`: free text from the synonym table
//! * `$var:<name>`: a value captured from an earlier step's result

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::resynth::ResynthesisModel;
use crate::services::Validation;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario `{scenario}` is malformed: {reason}")]
    ScenarioMalformed { scenario: String, reason: String },
    #[error("invalid scenario configuration: {0}")]
    ConfigInvalid(String),
}

fn malformed(scenario: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::ScenarioMalformed {
        scenario: scenario.to_owned(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub tool: String,
    #[serde(default = "empty_object")]
    pub args: Value,
    /// Variable name to a dotted path in the step's structured result.
    #[serde(default)]
    pub capture: BTreeMap<String, String>,
}

fn empty_object() -> Value {
    json!({})
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnFork {
    #[default]
    Abort,
    Approve,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestoreSignal {
    /// The harness tells the fence about each restore.
    #[default]
    Explicit,
    /// The fence infers restores from regressing request ids.
    Implicit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    #[serde(alias = "in_process")]
    InProcess,
    #[default]
    Http,
}

/// Server-side outcomes a scenario must produce. Unset fields are not
/// checked. Per-trial values must hold in every trial.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    pub duplicate_trials: Option<u64>,
    pub token_reuse: Option<u64>,
    pub transactions_per_trial: Option<u64>,
    pub transfer_requests_per_trial: Option<u64>,
    pub delete_requests_per_trial: Option<u64>,
    pub servers_per_trial: Option<u64>,
    pub replayed_per_trial: Option<u64>,
    pub replays_byte_equal: Option<bool>,
    pub fork_blocks_per_trial: Option<u64>,
    pub credential_blocks_per_trial: Option<u64>,
    /// Sorted recipients of the bank's transactions.
    pub recipients: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// A built-in script (`payment`, `approval`, `provision`) used when
    /// `steps` is empty.
    #[serde(default)]
    pub script: Option<String>,
    #[serde(default)]
    pub steps: Vec<Step>,
    /// Index of the step the checkpoint is taken before.
    #[serde(default)]
    pub checkpoint: Option<usize>,
    #[serde(default)]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fence: bool,
    /// Malformed replies the receipt service sends before behaving.
    #[serde(default)]
    pub crash_cycles: u32,
    /// Whether a crash restores the checkpoint (otherwise the agent dies).
    #[serde(default = "yes")]
    pub restore: bool,
    /// Deliberate restores to the checkpoint after the script completes.
    #[serde(default)]
    pub rollbacks: u32,
    #[serde(default = "stateless")]
    pub validation: Validation,
    #[serde(default)]
    pub on_fork: OnFork,
    #[serde(default)]
    pub restore_signal: RestoreSignal,
    #[serde(default)]
    pub resynthesis: ResynthesisModel,
    #[serde(default)]
    pub expect: Expectations,
}

fn yes() -> bool {
    true
}

fn stateless() -> Validation {
    Validation::Stateless
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub transport: Transport,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<ScenarioConfig>,
}

impl SuiteConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let mut suite: SuiteConfig = toml::from_str(text).map_err(|e| ScenarioError::ConfigInvalid(e.to_string()))?;
        for sc in &mut suite.scenarios {
            sc.resolve()?;
        }
        Ok(suite)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        let mut suite = Self::from_toml_str(&text)?;
        if suite.name.is_empty() {
            suite.name = path.display().to_string();
        }
        Ok(suite)
    }

    /// Checks every scenario; names must be unique.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut names = std::collections::BTreeSet::new();
        for sc in &self.scenarios {
            sc.validate()?;
            if !names.insert(sc.name.as_str()) {
                return Err(ScenarioError::ConfigInvalid(format!("scenario `{}` appears twice", sc.name)));
            }
        }
        Ok(())
    }
}

impl ScenarioConfig {
    /// Expands the built-in script and checks the configuration.
    pub fn resolve(&mut self) -> Result<(), ScenarioError> {
        if self.steps.is_empty() {
            let name = self
                .script
                .as_deref()
                .ok_or_else(|| malformed(&self.name, "needs `steps` or `script`"))?;
            let (steps, checkpoint) =
                builtin_script(name).ok_or_else(|| malformed(&self.name, format!("unknown script `{name}`")))?;
            self.steps = steps;
            self.checkpoint.get_or_insert(checkpoint);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.is_empty() {
            return Err(ScenarioError::ConfigInvalid("scenario without a name".into()));
        }
        if self.steps.is_empty() {
            return Err(malformed(&self.name, "no steps"));
        }
        let checkpoint = self.checkpoint.unwrap_or(0);
        if checkpoint > self.steps.len() {
            return Err(malformed(&self.name, format!("checkpoint {checkpoint} is past the last step")));
        }
        if !(0.0..=1.0).contains(&self.resynthesis.text_jitter) {
            return Err(malformed(&self.name, "text_jitter must be within [0, 1]"));
        }
        let mut known = Vec::new();
        for (i, step) in self.steps.iter().enumerate() {
            if step.tool.is_empty() {
                return Err(malformed(&self.name, format!("step {i} has no tool")));
            }
            if !step.args.is_object() {
                return Err(malformed(&self.name, format!("step {i} args must be a table")));
            }
            for var in placeholders(&step.args, "$var:") {
                if !known.contains(&var) {
                    return Err(malformed(&self.name, format!("step {i} uses `{var}` before it is captured")));
                }
            }
            known.extend(step.capture.keys().cloned());
        }
        if let Some(m) = &self.resynthesis.intent_mutation {
            if !self.steps.iter().any(|s| s.tool == m.tool) {
                return Err(malformed(&self.name, format!("intent_mutation names unused tool `{}`", m.tool)));
            }
            if m.values.is_empty() {
                return Err(malformed(&self.name, "intent_mutation needs at least one value"));
            }
        }
        Ok(())
    }
}

fn placeholders(value: &Value, prefix: &str) -> Vec<String> {
    match value {
        Value::String(s) => s.strip_prefix(prefix).map(|v| vec![v.to_owned()]).unwrap_or_default(),
        Value::Array(items) => items.iter().flat_map(|v| placeholders(v, prefix)).collect(),
        Value::Object(map) => map.values().flat_map(|v| placeholders(v, prefix)).collect(),
        _ => Vec::new(),
    }
}

fn step(tool: &str, args: Value, capture: &[(&str, &str)]) -> Step {
    Step {
        tool: tool.to_owned(),
        args,
        capture: capture.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

/// Built-in scripts and their checkpoint positions. In each, the checkpoint
/// sits after verification and before the irreversible action.
pub fn builtin_script(name: &str) -> Option<(Vec<Step>, usize)> {
    match name {
        // Pay Bob $500, then ask Bob's receipt service to confirm.
        "payment" => Some((
            vec![
                step("get_balance", json!({"account": "user"}), &[]),
                step(
                    "transfer",
                    json!({"amount": 50_000, "recipient": "Bob", "reference_id": "$uuid", "memo": "$text:memo"}),
                    &[("txn", "txn_id")],
                ),
                step("confirm_receipt", json!({"txn_id": "$var:txn"}), &[]),
            ],
            1,
        )),
        // A manager approves deleting Alice's data, then the agent deletes it.
        "approval" => Some((
            vec![
                step(
                    "grant_token",
                    json!({"action": "delete_data", "target": "Alice", "approver": "manager"}),
                    &[("token", "token")],
                ),
                step(
                    "delete_data",
                    json!({"target": "Alice", "token": "$var:token", "reason": "$text:reason"}),
                    &[],
                ),
            ],
            1,
        )),
        // Provision a server, then have the result confirmed externally.
        "provision" => Some((
            vec![
                step("list_servers", json!({}), &[]),
                step(
                    "create_server",
                    json!({"name": "web-1", "region": "eu-west", "size": "small", "client_token": "$uuid", "note": "$text:note"}),
                    &[("server", "server_id")],
                ),
                step("confirm_receipt", json!({"txn_id": "$var:server"}), &[]),
            ],
            1,
        )),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_scripts_resolve() {
        let suite = SuiteConfig::from_toml_str(
            r#"
            [[scenario]]
            name = "a"
            script = "payment"
            trials = 1
            "#,
        )
        .unwrap();
        let sc = &suite.scenarios[0];
        assert_eq!(sc.steps.len(), 3);
        assert_eq!(sc.checkpoint, Some(1));
        assert_eq!(sc.validation, Validation::Stateless);
        assert!(sc.restore);
    }

    #[test]
    fn explicit_steps_parse() {
        let suite = SuiteConfig::from_toml_str(
            r#"
            transport = "in-process"
            [[scenario]]
            name = "custom"
            checkpoint = 0
            [[scenario.steps]]
            tool = "transfer"
            args = { amount = 1, recipient = "Bob", reference_id = "$uuid" }
            capture = { t = "txn_id" }
            [[scenario.steps]]
            tool = "confirm_receipt"
            args = { txn_id = "$var:t" }
            "#,
        )
        .unwrap();
        assert_eq!(suite.transport, Transport::InProcess);
        assert_eq!(suite.scenarios[0].steps[1].args["txn_id"], json!("$var:t"));
    }

    #[test]
    fn malformed_scenarios_are_rejected() {
        let cases = [
            r#"[[scenario]]
               name = "x""#,
            r#"[[scenario]]
               name = "x"
               script = "nope""#,
            r#"[[scenario]]
               name = "x"
               script = "payment"
               checkpoint = 9"#,
            r#"[[scenario]]
               name = "x"
               [[scenario.steps]]
               tool = "confirm_receipt"
               args = { txn_id = "$var:missing" }"#,
            r#"[[scenario]]
               name = "x"
               script = "payment"
               resynthesis = { intent_mutation = { tool = "delete_data", path = "target", values = ["B"] } }"#,
        ];
        for text in cases {
            assert!(
                matches!(SuiteConfig::from_toml_str(text), Err(ScenarioError::ScenarioMalformed { .. })),
                "{text}"
            );
        }
        assert!(matches!(
            SuiteConfig::from_toml_str("[[scenario]]\nname = \"x\"\nbogus = 1"),
            Err(ScenarioError::ConfigInvalid(_))
        ));
    }
}
