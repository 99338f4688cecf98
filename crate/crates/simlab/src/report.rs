//! Per-trial ground truth read from server state, scenario checks, and the
//! suite report in JSON and table form.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use acrfence_core::effectlog::EffectLog;
use acrfence_core::protocol::canonical_bytes;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{CallOutcome, Transcript};
use crate::services::{ApprovalState, BankState, CloudState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: u64,
    pub seed: u64,
    /// Accepted bank transfers.
    pub transactions: u64,
    /// Distinct transfer intents (amount, recipient) the agent issued.
    pub intended_transfers: u64,
    pub duplicates: u64,
    pub recipients: Vec<String>,
    pub deletions: u64,
    /// Deletions that used a token an earlier deletion already used.
    pub token_reuse: u64,
    pub cross_target_deletions: u64,
    pub servers: u64,
    /// Server-side `tools/call` counters, by server then tool.
    pub requests: BTreeMap<String, BTreeMap<String, u64>>,
    /// What the agent saw, by outcome.
    pub outcomes: BTreeMap<String, u64>,
    pub replays_byte_equal: bool,
    pub crashes: u32,
    pub restores: u32,
    pub rollbacks: u32,
    pub forks_approved: u32,
    pub completed: bool,
    pub aborted: Option<String>,
}

impl TrialReport {
    pub fn requests_for(&self, tool: &str) -> u64 {
        self.requests.values().filter_map(|m| m.get(tool)).sum()
    }

    pub fn outcome_count(&self, outcome: CallOutcome) -> u64 {
        self.outcomes.get(outcome.as_str()).copied().unwrap_or(0)
    }
}

/// Server state at the end of a trial.
pub struct GroundTruth<'a> {
    pub bank: &'a BankState,
    pub approval: &'a ApprovalState,
    pub cloud: &'a CloudState,
    pub requests: BTreeMap<String, BTreeMap<String, u64>>,
}

/// Builds a trial report. `journal` is used only to check replayed
/// responses against what was recorded.
pub fn trial_report(
    trial: u64,
    seed: u64,
    truth: &GroundTruth<'_>,
    transcript: &Transcript,
    journal: Option<&EffectLog>,
) -> TrialReport {
    let transactions = truth.bank.transactions.len() as u64;
    let intents: BTreeSet<(String, String)> = transcript
        .calls
        .iter()
        .filter(|c| c.tool == "transfer")
        .map(|c| (c.arguments["amount"].to_string(), c.arguments["recipient"].to_string()))
        .collect();
    let intended_transfers = intents.len() as u64;

    let mut seen = HashSet::new();
    let token_reuse = truth
        .approval
        .deletions
        .iter()
        .filter(|d| !seen.insert(d.token_digest.as_str()))
        .count() as u64;

    let mut outcomes = BTreeMap::new();
    for call in &transcript.calls {
        *outcomes.entry(call.outcome.as_str().to_owned()).or_insert(0) += 1;
    }

    let replays_byte_equal = transcript
        .calls
        .iter()
        .filter(|c| c.outcome == CallOutcome::Replayed)
        .all(|c| {
            let recorded = c.replayed_from.and_then(|id| journal?.get(id)).map(|r| r.response);
            recorded.is_some_and(|r| canonical_bytes(&r) == canonical_bytes(&c.response))
        });

    TrialReport {
        trial,
        seed,
        transactions,
        intended_transfers,
        duplicates: transactions.saturating_sub(intended_transfers),
        recipients: truth.bank.transactions.iter().map(|t| t.recipient.clone()).collect(),
        deletions: truth.approval.deletions.len() as u64,
        token_reuse,
        cross_target_deletions: truth.approval.deletions.iter().filter(|d| d.is_cross_target()).count() as u64,
        servers: truth.cloud.servers.len() as u64,
        requests: truth.requests.clone(),
        outcomes,
        replays_byte_equal,
        crashes: transcript.crashes,
        restores: transcript.restores,
        rollbacks: transcript.rollbacks,
        forks_approved: transcript.forks_approved,
        completed: transcript.completed,
        aborted: transcript.aborted.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub expected: Value,
    pub observed: Value,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub description: String,
    pub trials: u64,
    pub fence_enabled: bool,
    /// Trials whose bank holds more transactions than the agent intended.
    pub duplicates_observed: u64,
    /// Trials in which a used approval token was accepted again.
    pub token_reuse_successes: u64,
    pub per_trial: Vec<TrialReport>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl ScenarioReport {
    pub fn new(
        scenario: &str,
        description: &str,
        fence_enabled: bool,
        per_trial: Vec<TrialReport>,
        expect: &crate::script::Expectations,
    ) -> Self {
        let mut report = Self {
            scenario: scenario.to_owned(),
            description: description.to_owned(),
            trials: per_trial.len() as u64,
            fence_enabled,
            duplicates_observed: per_trial.iter().filter(|t| t.duplicates > 0).count() as u64,
            token_reuse_successes: per_trial.iter().filter(|t| t.token_reuse > 0).count() as u64,
            per_trial,
            checks: Vec::new(),
            passed: true,
        };
        report.checks = evaluate(&report, expect);
        report.passed = report.checks.iter().all(|c| c.passed);
        report
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn total(name: &str, expected: u64, observed: u64) -> Check {
    Check {
        name: name.to_owned(),
        expected: expected.into(),
        observed: observed.into(),
        passed: expected == observed,
    }
}

/// Every trial must show `expected`; `observed` lists the per-trial values.
fn per_trial<T: Into<Value> + PartialEq + Clone>(name: &str, expected: T, observed: Vec<T>) -> Check {
    let passed = observed.iter().all(|o| *o == expected);
    Check {
        name: name.to_owned(),
        expected: expected.into(),
        observed: Value::Array(observed.into_iter().map(Into::into).collect()),
        passed,
    }
}

fn evaluate(r: &ScenarioReport, e: &crate::script::Expectations) -> Vec<Check> {
    let trials = &r.per_trial;
    let each = |f: &dyn Fn(&TrialReport) -> u64| trials.iter().map(f).collect::<Vec<u64>>();
    let mut checks = Vec::new();
    if let Some(n) = e.duplicate_trials {
        checks.push(total("duplicate_trials", n, r.duplicates_observed));
    }
    if let Some(n) = e.token_reuse {
        checks.push(total("token_reuse", n, r.token_reuse_successes));
    }
    if let Some(n) = e.transactions_per_trial {
        checks.push(per_trial("transactions_per_trial", n, each(&|t| t.transactions)));
    }
    if let Some(n) = e.transfer_requests_per_trial {
        checks.push(per_trial("transfer_requests_per_trial", n, each(&|t| t.requests_for("transfer"))));
    }
    if let Some(n) = e.delete_requests_per_trial {
        checks.push(per_trial("delete_requests_per_trial", n, each(&|t| t.requests_for("delete_data"))));
    }
    if let Some(n) = e.servers_per_trial {
        checks.push(per_trial("servers_per_trial", n, each(&|t| t.servers)));
    }
    if let Some(n) = e.replayed_per_trial {
        checks.push(per_trial(
            "replayed_per_trial",
            n,
            each(&|t| t.outcome_count(CallOutcome::Replayed)),
        ));
    }
    if let Some(flag) = e.replays_byte_equal {
        checks.push(per_trial(
            "replays_byte_equal",
            flag,
            trials.iter().map(|t| t.replays_byte_equal).collect(),
        ));
    }
    if let Some(n) = e.fork_blocks_per_trial {
        checks.push(per_trial(
            "fork_blocks_per_trial",
            n,
            each(&|t| t.outcome_count(CallOutcome::BlockedForkRequired)),
        ));
    }
    if let Some(n) = e.credential_blocks_per_trial {
        checks.push(per_trial(
            "credential_blocks_per_trial",
            n,
            each(&|t| t.outcome_count(CallOutcome::BlockedCredentialReuse)),
        ));
    }
    if let Some(expected) = &e.recipients {
        let mut want = expected.clone();
        want.sort();
        let observed: Vec<Value> = trials
            .iter()
            .map(|t| {
                let mut got = t.recipients.clone();
                got.sort();
                Value::from(got)
            })
            .collect();
        let passed = observed.iter().all(|o| *o == Value::from(want.clone()));
        checks.push(Check {
            name: "recipients".into(),
            expected: Value::from(want),
            observed: Value::Array(observed),
            passed,
        });
    }
    checks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub transport: String,
    pub scenarios: Vec<ScenarioReport>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn new(suite: &str, transport: &str, scenarios: Vec<ScenarioReport>) -> Self {
        let passed = scenarios.iter().all(|s| s.passed);
        Self {
            suite: suite.to_owned(),
            transport: transport.to_owned(),
            scenarios,
            passed,
        }
    }

    pub fn scenario(&self, name: &str) -> Option<&ScenarioReport> {
        self.scenarios.iter().find(|s| s.scenario == name)
    }

    /// Pretty JSON with sorted keys; identical inputs give identical bytes.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut text = serde_json::to_string_pretty(&value).expect("report serializes");
        text.push('\n');
        text
    }

    /// Aligned text table, one row per scenario. Failing rows are marked
    /// `!!` and their failed checks listed underneath.
    pub fn to_table(&self) -> String {
        let header = [
            "", "scenario", "fence", "trials", "duplicates", "token reuse", "txns/trial", "replayed", "blocked", "result",
        ];
        let mut rows: Vec<[String; 10]> = Vec::new();
        for s in &self.scenarios {
            let trials = s.trials;
            let txns = distinct(s.per_trial.iter().map(|t| t.transactions));
            let replayed: u64 = s.per_trial.iter().map(|t| t.outcome_count(CallOutcome::Replayed)).sum();
            let blocked: u64 = s
                .per_trial
                .iter()
                .map(|t| t.outcome_count(CallOutcome::BlockedForkRequired) + t.outcome_count(CallOutcome::BlockedCredentialReuse))
                .sum();
            rows.push([
                if s.passed { String::new() } else { "!!".into() },
                s.scenario.clone(),
                if s.fence_enabled { "on".into() } else { "off".into() },
                trials.to_string(),
                format!("{}/{}", s.duplicates_observed, trials),
                format!("{}/{}", s.token_reuse_successes, trials),
                txns,
                replayed.to_string(),
                blocked.to_string(),
                if s.passed { "PASS".into() } else { "FAIL".into() },
            ]);
        }
        let mut widths = header.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |cells: &[&str], out: &mut String| {
            let mut text = String::new();
            for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
                if i > 0 {
                    text.push_str("  ");
                }
                let _ = write!(text, "{cell:<w$}");
            }
            out.push_str(text.trim_end());
            out.push('\n');
        };
        let _ = writeln!(out, "suite: {} ({})", self.suite, self.transport);
        line(&header, &mut out);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&rule.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
        for (row, s) in rows.iter().zip(&self.scenarios) {
            line(&row.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
            for c in s.failed_checks() {
                let _ = writeln!(out, "    {}: expected {}, observed {}", c.name, c.expected, c.observed);
            }
        }
        let failed = self.scenarios.iter().filter(|s| !s.passed).count();
        let _ = writeln!(out, "{} scenario(s), {} failed", self.scenarios.len(), failed);
        out
    }
}

/// "2" when every trial agrees, "1..4" otherwise, "-" when empty.
fn distinct(values: impl Iterator<Item = u64>) -> String {
    let set: BTreeSet<u64> = values.collect();
    match (set.first(), set.last()) {
        (Some(a), Some(b)) if a == b => a.to_string(),
        (Some(a), Some(b)) => format!("{a}..{b}"),
        _ => "-".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::script::Expectations;

    fn trial(transactions: u64, intended: u64) -> TrialReport {
        TrialReport {
            trial: 0,
            seed: 0,
            transactions,
            intended_transfers: intended,
            duplicates: transactions.saturating_sub(intended),
            recipients: vec!["Bob".into(); transactions as usize],
            deletions: 0,
            token_reuse: 0,
            cross_target_deletions: 0,
            servers: 0,
            requests: BTreeMap::new(),
            outcomes: BTreeMap::new(),
            replays_byte_equal: true,
            crashes: 0,
            restores: 0,
            rollbacks: 0,
            forks_approved: 0,
            completed: true,
            aborted: None,
        }
    }

    #[test]
    fn checks_and_flags() {
        let expect = Expectations {
            duplicate_trials: Some(0),
            transactions_per_trial: Some(1),
            ..Expectations::default()
        };
        let good = ScenarioReport::new("ok", "", true, vec![trial(1, 1), trial(1, 1)], &expect);
        assert!(good.passed);
        let bad = ScenarioReport::new("bad", "", false, vec![trial(1, 1), trial(2, 1)], &expect);
        assert!(!bad.passed);
        assert_eq!(bad.duplicates_observed, 1);
        let suite = SuiteReport::new("s", "in-process", vec![good, bad]);
        let table = suite.to_table();
        assert!(table.lines().any(|l| l.starts_with("!!") && l.contains("bad")));
        assert!(table.contains("transactions_per_trial: expected 1, observed [1,2]"));
        assert!(table.contains("2 scenario(s), 1 failed"));
        assert!(!suite.passed);
    }

    #[test]
    fn empty_suite_passes() {
        let suite = SuiteReport::new("empty", "http", vec![]);
        assert!(suite.passed);
        assert!(suite.to_table().contains("0 scenario(s), 0 failed"));
        assert_eq!(suite.to_json(), suite.clone().to_json());
    }

    #[test]
    fn distinct_ranges() {
        assert_eq!(distinct([2, 2].into_iter()), "2");
        assert_eq!(distinct([1, 4, 2].into_iter()), "1..4");
        assert_eq!(distinct(std::iter::empty()), "-");
    }
}
