//! Optional external analyzer consulted on the restore path.
//!
//! Wire contract: one HTTP POST whose body is a comparison document, answered
//! by a single JSON object `{"kind": ..., "rationale": ...}` where `kind` is
//! `ReplayEquivalent` or `Divergent`. Anything else falls back to the rule
//! engine.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{classify, Verdict, VerdictKind, VerdictSource};
use crate::classifier::ToolPolicy;
use crate::effectlog::EffectRecord;
use crate::protocol::{canonical_string, parse_strict, ToolCall};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalyzerError {
    #[error("analyzer unreachable: {0}")]
    Unreachable(String),
    #[error("analyzer reply malformed: {0}")]
    Malformed(String),
}

pub trait Analyzer: Send + Sync {
    /// Sends one comparison document and returns the raw reply body.
    fn exchange(&self, request: &Value) -> Result<String, AnalyzerError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerEndpoint {
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Header name for the credential, e.g. `Authorization`.
    #[serde(default)]
    pub auth_header: Option<String>,
    /// Environment variable holding the header value.
    #[serde(default)]
    pub auth_env: Option<String>,
}

fn default_timeout_ms() -> u64 {
    2_000
}

pub struct HttpAnalyzer {
    agent: ureq::Agent,
    url: String,
    auth: Option<(String, String)>,
}

impl HttpAnalyzer {
    pub fn from_endpoint(endpoint: &AnalyzerEndpoint) -> Self {
        let timeout = Duration::from_millis(endpoint.timeout_ms);
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let auth = match (&endpoint.auth_header, &endpoint.auth_env) {
            (Some(header), Some(var)) => std::env::var(var).ok().map(|v| (header.clone(), v)),
            _ => None,
        };
        Self {
            agent,
            url: endpoint.url.clone(),
            auth,
        }
    }
}

impl Analyzer for HttpAnalyzer {
    fn exchange(&self, request: &Value) -> Result<String, AnalyzerError> {
        let mut req = self
            .agent
            .post(&self.url)
            .set("Content-Type", crate::transport::CONTENT_TYPE);
        if let Some((header, value)) = &self.auth {
            req = req.set(header, value);
        }
        match req.send_string(&canonical_string(request)) {
            Ok(resp) => resp
                .into_string()
                .map_err(|e| AnalyzerError::Malformed(e.to_string())),
            Err(ureq::Error::Status(code, _)) => {
                Err(AnalyzerError::Unreachable(format!("HTTP status {code}")))
            }
            Err(e) => Err(AnalyzerError::Unreachable(e.to_string())),
        }
    }
}

/// The comparison document sent to the analyzer.
pub fn comparison_request(call: &ToolCall, candidate: &EffectRecord, policy: &ToolPolicy) -> Value {
    json!({
        "tool_name": call.tool_name,
        "recorded": {
            "record_id": candidate.record_id,
            "tool_name": candidate.tool_name,
            "arguments": candidate.arguments,
        },
        "incoming": {
            "seq_index": call.seq_index,
            "arguments": call.arguments,
        },
        "hints": {
            "intent_fields": policy.intent_fields,
            "volatile_fields": policy.volatile_fields,
        },
        "allowed_kinds": ["ReplayEquivalent", "Divergent"],
    })
}

/// Parses a reply into exactly one verdict kind and its rationale.
pub fn parse_reply(body: &str) -> Result<(VerdictKind, String), AnalyzerError> {
    let value = parse_strict(body.trim().as_bytes())
        .map_err(|e| AnalyzerError::Malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| AnalyzerError::Malformed("reply is not an object".into()))?;
    if let Some(key) = obj.keys().find(|k| *k != "kind" && *k != "rationale") {
        return Err(AnalyzerError::Malformed(format!("unexpected member `{key}`")));
    }
    let kind = match obj.get("kind").and_then(Value::as_str) {
        Some("ReplayEquivalent") => VerdictKind::ReplayEquivalent,
        Some("Divergent") => VerdictKind::Divergent,
        Some(other) => {
            return Err(AnalyzerError::Malformed(format!("kind `{other}` not allowed")))
        }
        None => return Err(AnalyzerError::Malformed("missing kind".into())),
    };
    let rationale = match obj.get("rationale") {
        None => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(AnalyzerError::Malformed("rationale must be a string".into())),
    };
    Ok((kind, rationale))
}

/// Asks the external analyzer to compare `call` with its journaled candidate.
///
/// Consumed credentials and tool mismatches are decided locally without a
/// network exchange. On any analyzer failure the rule engine's verdict is
/// returned with the fallback noted in the rationale.
pub fn analyze_external(
    call: &ToolCall,
    candidate: &EffectRecord,
    policy: &ToolPolicy,
    analyzer: &dyn Analyzer,
    consumed_check: &dyn Fn(&str) -> bool,
) -> Verdict {
    let local = classify(call, Some(candidate), policy, consumed_check);
    if local.kind == VerdictKind::CredentialReuse || candidate.tool_name != call.tool_name {
        return local;
    }
    let reply = analyzer
        .exchange(&comparison_request(call, candidate, policy))
        .and_then(|body| parse_reply(&body));
    match reply {
        Ok((kind, rationale)) => Verdict {
            kind,
            candidate: Some(candidate.record_id),
            diff: local.diff,
            reused_tokens: None,
            rationale: format!("analyzer: {rationale}"),
            source: VerdictSource::Analyzer,
        },
        Err(err) => {
            tracing::warn!(error = %err, record_id = candidate.record_id, "analyzer fallback to rule engine");
            Verdict {
                rationale: format!("rule engine fallback ({err}); {}", local.rationale),
                source: VerdictSource::AnalyzerFallback,
                ..local
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effectlog::Outcome;
    use std::sync::Mutex;

    struct Canned(Result<String, AnalyzerError>, Mutex<Vec<Value>>);

    impl Canned {
        fn new(reply: Result<&str, AnalyzerError>) -> Self {
            Self(reply.map(str::to_owned), Mutex::new(Vec::new()))
        }
    }

    impl Analyzer for Canned {
        fn exchange(&self, request: &Value) -> Result<String, AnalyzerError> {
            self.1.lock().unwrap().push(request.clone());
            self.0.clone()
        }
    }

    fn policy() -> ToolPolicy {
        ToolPolicy::irreversible("transfer")
            .intent(["amount", "recipient"])
            .volatile(["ref"])
    }

    fn fixture(new_recipient: &str) -> (ToolCall, EffectRecord) {
        let call = ToolCall {
            session_id: "s1".into(),
            branch_id: "b0".into(),
            seq_index: 1,
            tool_name: "transfer".into(),
            arguments: json!({"amount": 500, "recipient": new_recipient, "ref": "B"}),
            wire_id: json!(4),
        };
        let rec = EffectRecord {
            record_id: 1,
            session_id: "s1".into(),
            branch_id: "b0".into(),
            parent_branch_id: None,
            seq_index: 1,
            tool_name: "transfer".into(),
            arguments: json!({"amount": 500, "recipient": "Bob", "ref": "A"}),
            env_context: Default::default(),
            response: json!({"result": {}}),
            outcome: Outcome::Succeeded,
            consumed_credentials: vec![],
            irreversible: true,
        };
        (call, rec)
    }

    #[test]
    fn direct_mapping() {
        let (call, rec) = fixture("Bob");
        let analyzer = Canned::new(Ok(r#"{"kind":"ReplayEquivalent","rationale":"only ref id changed"}"#));
        let v = analyze_external(&call, &rec, &policy(), &analyzer, &|_| false);
        assert_eq!(v.kind, VerdictKind::ReplayEquivalent);
        assert_eq!(v.candidate, Some(1));
        assert_eq!(v.source, VerdictSource::Analyzer);
        assert!(v.rationale.contains("only ref id changed"));
        let sent = analyzer.1.lock().unwrap();
        assert_eq!(sent[0]["recorded"]["arguments"]["ref"], json!("A"));
        assert_eq!(sent[0]["hints"]["volatile_fields"], json!(["ref"]));
    }

    #[test]
    fn prose_falls_back() {
        let (call, rec) = fixture("Carol");
        let analyzer = Canned::new(Ok("These look the same to me."));
        let v = analyze_external(&call, &rec, &policy(), &analyzer, &|_| false);
        assert_eq!(v.kind, VerdictKind::Divergent);
        assert_eq!(v.source, VerdictSource::AnalyzerFallback);
        assert!(v.rationale.contains("fallback"));
    }

    #[test]
    fn unreachable_falls_back() {
        let (call, rec) = fixture("Bob");
        let analyzer = Canned::new(Err(AnalyzerError::Unreachable("connection refused".into())));
        let v = analyze_external(&call, &rec, &policy(), &analyzer, &|_| false);
        assert_eq!(v.kind, VerdictKind::ReplayEquivalent);
        assert_eq!(v.source, VerdictSource::AnalyzerFallback);
        assert!(v.rationale.contains("connection refused"));
    }

    #[test]
    fn reply_contract() {
        assert!(parse_reply(r#"{"kind":"Divergent"}"#).is_ok());
        assert!(parse_reply(r#"{"kind":"FreshCall"}"#).is_err());
        assert!(parse_reply(r#"{"kind":"Divergent","extra":1}"#).is_err());
        assert!(parse_reply(r#"[{"kind":"Divergent"}]"#).is_err());
        assert!(parse_reply(r#"{"kind":"Divergent","kind":"ReplayEquivalent"}"#).is_err());
    }

    #[test]
    fn real_http_connection_refused() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let analyzer = HttpAnalyzer::from_endpoint(&AnalyzerEndpoint {
            url: format!("http://{addr}/analyze"),
            timeout_ms: 500,
            auth_header: None,
            auth_env: None,
        });
        let (call, rec) = fixture("Bob");
        let v = analyze_external(&call, &rec, &policy(), &analyzer, &|_| false);
        assert_eq!(v.source, VerdictSource::AnalyzerFallback);
    }
}
