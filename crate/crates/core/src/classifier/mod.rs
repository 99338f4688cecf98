//! Post-restore call classification.
//!
//! The default engine is a deterministic rule engine driven by [`ToolPolicy`]:
//! argument trees are flattened to leaf paths, each leaf is classed as intent
//! or volatile, and only intent changes make a call divergent. An external
//! analyzer can be plugged in for the restore path; when it fails or answers
//! out of contract the rule engine decides.

mod analyzer;
mod policy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::effectlog::EffectRecord;
use crate::protocol::ToolCall;

pub use analyzer::{
    analyze_external, comparison_request, parse_reply, Analyzer, AnalyzerEndpoint, AnalyzerError,
    HttpAnalyzer,
};
pub use policy::{
    Credential, DefaultPolicy, FieldClass, PolicyError, PolicyMissing, PolicySet, ToolPolicy,
    UnknownFieldTreatment,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentChange {
    pub path: String,
    /// `None` when the leaf is absent on that side.
    pub old: Option<Value>,
    pub new: Option<Value>,
}

/// Leaf-level comparison of two argument trees.
///
/// The five lists partition the union of both trees' leaf paths:
/// intent leaves go to `equal_intent` or `changed_intent` (including intent
/// leaves present on one side only); volatile leaves present on both sides go
/// to `changed_volatile` whatever their values; volatile leaves present on
/// one side only go to `added` or `removed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldDiff {
    pub equal_intent: Vec<String>,
    pub changed_intent: Vec<IntentChange>,
    pub changed_volatile: Vec<String>,
    pub added: Vec<String>,
    pub removed: Vec<String>,
}

impl FieldDiff {
    pub fn changed_intent_paths(&self) -> Vec<&str> {
        self.changed_intent.iter().map(|c| c.path.as_str()).collect()
    }

    /// Every path in the diff, for partition checks.
    pub fn all_paths(&self) -> Vec<&str> {
        self.equal_intent
            .iter()
            .map(String::as_str)
            .chain(self.changed_intent.iter().map(|c| c.path.as_str()))
            .chain(self.changed_volatile.iter().map(String::as_str))
            .chain(self.added.iter().map(String::as_str))
            .chain(self.removed.iter().map(String::as_str))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictKind {
    ReplayEquivalent,
    Divergent,
    CredentialReuse,
    FreshCall,
}

impl VerdictKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ReplayEquivalent => "ReplayEquivalent",
            Self::Divergent => "Divergent",
            Self::CredentialReuse => "CredentialReuse",
            Self::FreshCall => "FreshCall",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictSource {
    RuleEngine,
    Analyzer,
    AnalyzerFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub candidate: Option<u64>,
    pub diff: Option<FieldDiff>,
    /// Source fields of credentials already consumed.
    pub reused_tokens: Option<Vec<String>>,
    pub rationale: String,
    pub source: VerdictSource,
}

/// A leaf of an argument tree: a scalar, or an empty container.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Leaf<'a> {
    pub segments: Vec<String>,
    pub value: &'a Value,
}

pub(crate) fn leaves(tree: &Value) -> BTreeMap<String, Leaf<'_>> {
    fn walk<'a>(value: &'a Value, path: &mut Vec<String>, out: &mut BTreeMap<String, Leaf<'a>>) {
        match value {
            Value::Object(map) if !map.is_empty() => {
                for (k, v) in map {
                    path.push(k.clone());
                    walk(v, path, out);
                    path.pop();
                }
            }
            Value::Array(items) if !items.is_empty() => {
                for (i, v) in items.iter().enumerate() {
                    path.push(i.to_string());
                    walk(v, path, out);
                    path.pop();
                }
            }
            _ if path.is_empty() => {}
            _ => {
                out.insert(
                    path.join("."),
                    Leaf {
                        segments: path.clone(),
                        value,
                    },
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(tree, &mut Vec::new(), &mut out);
    out
}

#[derive(PartialEq)]
enum Numeric {
    Int(i128),
    Float(f64),
}

fn numeric(n: &serde_json::Number) -> Numeric {
    if let Some(i) = n.as_i64() {
        return Numeric::Int(i as i128);
    }
    if let Some(u) = n.as_u64() {
        return Numeric::Int(u as i128);
    }
    let f = n.as_f64().unwrap_or(f64::NAN);
    if f.fract() == 0.0 && f.abs() < 1.0e18 {
        Numeric::Int(f as i128)
    } else {
        Numeric::Float(f)
    }
}

/// Scalar equality: strings byte-equal, numbers by canonical numeric value
/// (`500 == 500.0`).
pub fn scalars_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => numeric(x) == numeric(y),
        _ => a == b,
    }
}

/// Classifies every leaf path of the two trees per `policy`.
pub fn diff_arguments(old: &Value, new: &Value, policy: &ToolPolicy) -> FieldDiff {
    let old_leaves = leaves(old);
    let new_leaves = leaves(new);
    let mut diff = FieldDiff::default();
    let mut paths: Vec<&String> = old_leaves.keys().chain(new_leaves.keys()).collect();
    paths.sort();
    paths.dedup();
    for path in paths {
        let before = old_leaves.get(path);
        let after = new_leaves.get(path);
        let segments = &before.or(after).expect("path from one side").segments;
        match policy.field_class(segments) {
            FieldClass::Intent => match (before, after) {
                (Some(b), Some(a)) if scalars_equal(b.value, a.value) => {
                    diff.equal_intent.push(path.clone())
                }
                _ => diff.changed_intent.push(IntentChange {
                    path: path.clone(),
                    old: before.map(|l| l.value.clone()),
                    new: after.map(|l| l.value.clone()),
                }),
            },
            FieldClass::Volatile => match (before, after) {
                (Some(_), Some(_)) => diff.changed_volatile.push(path.clone()),
                (None, Some(_)) => diff.added.push(path.clone()),
                (Some(_), None) => diff.removed.push(path.clone()),
                (None, None) => unreachable!(),
            },
        }
    }
    diff
}

/// Rule-engine classification of a call against its journaled candidate.
///
/// Precedence: consumed credentials first, then absent candidate, then tool
/// mismatch or intent change, else equivalent.
pub fn classify(
    call: &ToolCall,
    candidate: Option<&EffectRecord>,
    policy: &ToolPolicy,
    consumed_check: &dyn Fn(&str) -> bool,
) -> Verdict {
    let reused: Vec<String> = policy
        .extract_credentials(&call.arguments)
        .into_iter()
        .filter(|c| consumed_check(&c.token))
        .map(|c| c.source_field)
        .collect();
    let candidate_id = candidate.map(|c| c.record_id);

    if !reused.is_empty() {
        let rationale = format!("already consumed credential in {}", reused.join(", "));
        return Verdict {
            kind: VerdictKind::CredentialReuse,
            candidate: candidate_id,
            diff: candidate
                .filter(|c| c.tool_name == call.tool_name)
                .map(|c| diff_arguments(&c.arguments, &call.arguments, policy)),
            reused_tokens: Some(reused),
            rationale,
            source: VerdictSource::RuleEngine,
        };
    }

    let Some(record) = candidate else {
        return Verdict {
            kind: VerdictKind::FreshCall,
            candidate: None,
            diff: None,
            reused_tokens: None,
            rationale: "no journaled effect at this position".into(),
            source: VerdictSource::RuleEngine,
        };
    };

    if record.tool_name != call.tool_name {
        return Verdict {
            kind: VerdictKind::Divergent,
            candidate: candidate_id,
            diff: None,
            reused_tokens: None,
            rationale: format!(
                "tool mismatch: journaled `{}`, now `{}`",
                record.tool_name, call.tool_name
            ),
            source: VerdictSource::RuleEngine,
        };
    }

    let diff = diff_arguments(&record.arguments, &call.arguments, policy);
    let (kind, rationale) = if diff.changed_intent.is_empty() {
        let rationale = if diff.changed_volatile.is_empty() {
            "intent fields unchanged".to_owned()
        } else {
            format!(
                "intent fields unchanged; volatile fields {}",
                diff.changed_volatile.join(", ")
            )
        };
        (VerdictKind::ReplayEquivalent, rationale)
    } else {
        (
            VerdictKind::Divergent,
            format!("intent changed: {}", diff.changed_intent_paths().join(", ")),
        )
    };
    Verdict {
        kind,
        candidate: candidate_id,
        diff: Some(diff),
        reused_tokens: None,
        rationale,
        source: VerdictSource::RuleEngine,
    }
}

/// Like [`classify`], resolving the policy from a set first.
pub fn classify_with_policies(
    call: &ToolCall,
    candidate: Option<&EffectRecord>,
    policies: &PolicySet,
    consumed_check: &dyn Fn(&str) -> bool,
) -> Result<Verdict, PolicyMissing> {
    let policy = policies.resolve(&call.tool_name)?;
    Ok(classify(call, candidate, &policy, consumed_check))
}
