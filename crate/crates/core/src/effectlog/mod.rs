//! Append-only journal of irreversible tool effects and the registry of
//! consumed credentials.
//!
//! Records are written in two phases: a `pending` entry (outcome `Unknown`)
//! is made durable before the call is forwarded, and a `finalize` entry
//! carries the server's response afterwards. A crash in between leaves the
//! record visible with outcome `Unknown`.

mod journal;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{Credential, ToolPolicy};
use crate::clock::{Clock, SystemClock};
use crate::protocol::ToolCall;

pub use journal::{
    read_entries, BlockedEntry, FinalizeEntry, ForkEntry, JournalEntry, JournalSink, MemorySink, PendingEntry,
};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("effect already journaled at ({session_id}, {branch_id}, {seq_index})")]
    DuplicateKey {
        session_id: String,
        branch_id: String,
        seq_index: u64,
    },
    #[error("no record {0}")]
    NotFound(u64),
    #[error("record {0} is already finalized")]
    AlreadyFinalized(u64),
    #[error("policy for `{0}` marks it reversible; reversible calls are not journaled")]
    NotIrreversible(String),
    #[error("records can only be finalized as Succeeded or Failed")]
    UnknownOutcome,
    #[error("journal write failed: {0}")]
    StorageFailure(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt journal entry: {reason}")]
    Corrupt {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("inconsistent journal: {0}")]
    Inconsistent(String),
}

impl LogError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Succeeded,
    Failed,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRecord {
    pub record_id: u64,
    pub session_id: String,
    pub branch_id: String,
    pub parent_branch_id: Option<String>,
    pub seq_index: u64,
    pub tool_name: String,
    pub arguments: Value,
    pub env_context: BTreeMap<String, String>,
    /// Recorded server response; `null` until finalized.
    pub response: Value,
    pub outcome: Outcome,
    pub consumed_credentials: Vec<String>,
    pub irreversible: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialDigest {
    pub digest: String,
    pub source_field: String,
    pub consumed_by: u64,
    pub consumed_at: u64,
}

/// SHA-256 digest of a credential; the raw token never reaches the journal.
pub fn credential_digest(token: &str) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(token.as_bytes())))
}

#[derive(Default)]
struct LogState {
    records: Vec<EffectRecord>,
    by_identity: HashMap<(String, String, u64), usize>,
    by_id: HashMap<u64, usize>,
    consumed: BTreeMap<String, CredentialDigest>,
    forks: Vec<ForkEntry>,
    blocked: Vec<BlockedEntry>,
    next_id: u64,
}

impl LogState {
    fn new() -> Self {
        Self {
            next_id: 1,
            ..Self::default()
        }
    }

    fn apply(&mut self, entry: JournalEntry) -> Result<(), LogError> {
        match entry {
            JournalEntry::Pending(p) => {
                let key = (p.session_id.clone(), p.branch_id.clone(), p.seq_index);
                if self.by_identity.contains_key(&key) {
                    return Err(LogError::Inconsistent(format!(
                        "identity ({}, {}, {}) repeats",
                        key.0, key.1, key.2
                    )));
                }
                if p.record_id < self.next_id {
                    return Err(LogError::Inconsistent(format!(
                        "record id {} is not increasing",
                        p.record_id
                    )));
                }
                let idx = self.records.len();
                self.next_id = p.record_id + 1;
                self.by_identity.insert(key, idx);
                self.by_id.insert(p.record_id, idx);
                self.records.push(EffectRecord {
                    record_id: p.record_id,
                    session_id: p.session_id,
                    branch_id: p.branch_id,
                    parent_branch_id: p.parent_branch_id,
                    seq_index: p.seq_index,
                    tool_name: p.tool_name,
                    arguments: p.arguments,
                    env_context: p.env_context,
                    response: Value::Null,
                    outcome: Outcome::Unknown,
                    consumed_credentials: Vec::new(),
                    irreversible: p.irreversible,
                });
            }
            JournalEntry::Finalize(f) => {
                let idx = *self
                    .by_id
                    .get(&f.record_id)
                    .ok_or_else(|| LogError::Inconsistent(format!("finalize of unknown record {}", f.record_id)))?;
                let rec = &mut self.records[idx];
                if rec.outcome != Outcome::Unknown || f.outcome == Outcome::Unknown {
                    return Err(LogError::Inconsistent(format!(
                        "record {} finalized twice",
                        f.record_id
                    )));
                }
                rec.response = f.response;
                rec.outcome = f.outcome;
            }
            JournalEntry::Consume(c) => {
                let idx = *self.by_id.get(&c.consumed_by).ok_or_else(|| {
                    LogError::Inconsistent(format!("consumption by unknown record {}", c.consumed_by))
                })?;
                if self.consumed.contains_key(&c.digest) {
                    return Err(LogError::Inconsistent(format!("digest {} consumed twice", c.digest)));
                }
                self.records[idx].consumed_credentials.push(c.digest.clone());
                self.consumed.insert(c.digest.clone(), c);
            }
            JournalEntry::Fork(f) => self.forks.push(f),
            JournalEntry::Blocked(b) => self.blocked.push(b),
        }
        Ok(())
    }

    fn lookup(&self, session_id: &str, branch_id: &str, seq_index: u64) -> Option<&EffectRecord> {
        self.by_identity
            .get(&(session_id.to_owned(), branch_id.to_owned(), seq_index))
            .map(|&idx| &self.records[idx])
    }
}

/// Filter for [`EffectLog::query`]; unset fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFilter {
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub branch_id: Option<String>,
    #[serde(default)]
    pub tool_name: Option<String>,
}

impl RecordFilter {
    pub fn matches(&self, rec: &EffectRecord) -> bool {
        self.session_id.as_ref().is_none_or(|s| *s == rec.session_id)
            && self.branch_id.as_ref().is_none_or(|b| *b == rec.branch_id)
            && self.tool_name.as_ref().is_none_or(|t| *t == rec.tool_name)
    }
}

/// Journal state reconstructed from a file, for read-only inspection.
#[derive(Debug, Clone, Default)]
pub struct JournalView {
    pub records: Vec<EffectRecord>,
    pub consumed: Vec<CredentialDigest>,
    pub forks: Vec<ForkEntry>,
    pub blocked: Vec<BlockedEntry>,
}

impl JournalView {
    pub fn load(path: &Path) -> Result<Self, LogError> {
        if !path.is_file() {
            return Err(LogError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "journal file not found"),
            ));
        }
        let (entries, _) = read_entries(path)?;
        let mut state = LogState::new();
        for entry in entries {
            state.apply(entry)?;
        }
        Ok(Self {
            records: state.records,
            consumed: state.consumed.into_values().collect(),
            forks: state.forks,
            blocked: state.blocked,
        })
    }
}

pub struct EffectLog {
    state: RwLock<LogState>,
    sink: Mutex<Box<dyn JournalSink>>,
    clock: Arc<dyn Clock>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for EffectLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EffectLog").field("path", &self.path).finish_non_exhaustive()
    }
}

impl EffectLog {
    /// Opens (or creates) a journal file, fsyncing every entry.
    pub fn open(path: &Path) -> Result<Self, LogError> {
        Self::open_with(path, true, Arc::new(SystemClock))
    }

    pub fn open_with(path: &Path, sync: bool, clock: Arc<dyn Clock>) -> Result<Self, LogError> {
        let (entries, valid_len) = read_entries(path)?;
        let mut state = LogState::new();
        for entry in entries {
            state.apply(entry)?;
        }
        let sink = journal::open_file_sink(path, valid_len, sync)?;
        Ok(Self {
            state: RwLock::new(state),
            sink: Mutex::new(Box::new(sink)),
            clock,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn in_memory() -> Self {
        Self::with_sink(Box::new(MemorySink), Arc::new(SystemClock))
    }

    pub fn with_sink(sink: Box<dyn JournalSink>, clock: Arc<dyn Clock>) -> Self {
        Self {
            state: RwLock::new(LogState::new()),
            sink: Mutex::new(sink),
            clock,
            path: None,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, LogState> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    /// Writes one entry through the sink and folds it into memory. The
    /// caller must hold the sink lock so entries are totally ordered.
    fn commit(&self, sink: &mut Box<dyn JournalSink>, entry: JournalEntry) -> Result<(), LogError> {
        sink.append(&entry.to_line())
            .map_err(|e| LogError::StorageFailure(e.to_string()))?;
        self.state
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .apply(entry)
    }

    fn lock_sink(&self) -> std::sync::MutexGuard<'_, Box<dyn JournalSink>> {
        self.sink.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Journals a call as pending. Must complete before the call is
    /// forwarded.
    pub fn append_pending(
        &self,
        call: &ToolCall,
        parent_branch_id: Option<&str>,
        policy: &ToolPolicy,
        env_context: BTreeMap<String, String>,
    ) -> Result<u64, LogError> {
        if !policy.irreversible {
            return Err(LogError::NotIrreversible(policy.tool_name.clone()));
        }
        let mut sink = self.lock_sink();
        let record_id = {
            let state = self.read();
            if state
                .lookup(&call.session_id, &call.branch_id, call.seq_index)
                .is_some()
            {
                return Err(LogError::DuplicateKey {
                    session_id: call.session_id.clone(),
                    branch_id: call.branch_id.clone(),
                    seq_index: call.seq_index,
                });
            }
            state.next_id
        };
        let entry = JournalEntry::Pending(PendingEntry {
            record_id,
            session_id: call.session_id.clone(),
            branch_id: call.branch_id.clone(),
            parent_branch_id: parent_branch_id.map(str::to_owned),
            seq_index: call.seq_index,
            tool_name: call.tool_name.clone(),
            arguments: call.arguments.clone(),
            env_context,
            irreversible: true,
        });
        self.commit(&mut sink, entry)?;
        Ok(record_id)
    }

    pub fn finalize(&self, record_id: u64, response: Value, outcome: Outcome) -> Result<(), LogError> {
        if outcome == Outcome::Unknown {
            return Err(LogError::UnknownOutcome);
        }
        let mut sink = self.lock_sink();
        match self.get(record_id) {
            None => return Err(LogError::NotFound(record_id)),
            Some(rec) if rec.outcome != Outcome::Unknown => {
                return Err(LogError::AlreadyFinalized(record_id))
            }
            Some(_) => {}
        }
        let entry = JournalEntry::Finalize(FinalizeEntry {
            record_id,
            response,
            outcome,
            finalized_at: self.clock.now_ms(),
        });
        self.commit(&mut sink, entry)
    }

    pub fn get(&self, record_id: u64) -> Option<EffectRecord> {
        let state = self.read();
        state.by_id.get(&record_id).map(|&i| state.records[i].clone())
    }

    /// The record at `seq_index` with the same tool, from the nearest branch
    /// in `branch_ancestry` (most derived first) that journaled one.
    pub fn find_candidate(
        &self,
        session_id: &str,
        branch_ancestry: &[String],
        seq_index: u64,
        tool_name: &str,
    ) -> Option<EffectRecord> {
        let state = self.read();
        branch_ancestry
            .iter()
            .filter_map(|b| state.lookup(session_id, b, seq_index))
            .find(|rec| rec.tool_name == tool_name)
            .cloned()
    }

    /// The record at `seq_index` from the nearest branch in the ancestry,
    /// whatever its tool.
    pub fn record_at(
        &self,
        session_id: &str,
        branch_ancestry: &[String],
        seq_index: u64,
    ) -> Option<EffectRecord> {
        let state = self.read();
        branch_ancestry
            .iter()
            .find_map(|b| state.lookup(session_id, b, seq_index))
            .cloned()
    }

    /// Adds each credential's digest to the consumed set, attributed to
    /// `record_id`. Digests already consumed keep their first attribution.
    pub fn mark_consumed(&self, credentials: &[Credential], record_id: u64) -> Result<(), LogError> {
        let mut sink = self.lock_sink();
        if self.get(record_id).is_none() {
            return Err(LogError::NotFound(record_id));
        }
        for cred in credentials.iter().filter(|c| !c.token.is_empty()) {
            let digest = credential_digest(&cred.token);
            if self.read().consumed.contains_key(&digest) {
                continue;
            }
            let entry = JournalEntry::Consume(CredentialDigest {
                digest,
                source_field: cred.source_field.clone(),
                consumed_by: record_id,
                consumed_at: self.clock.now_ms(),
            });
            self.commit(&mut sink, entry)?;
        }
        Ok(())
    }

    pub fn is_consumed(&self, token: &str) -> bool {
        self.consumption(token).is_some()
    }

    pub fn consumption(&self, token: &str) -> Option<CredentialDigest> {
        if token.is_empty() {
            return None;
        }
        self.read().consumed.get(&credential_digest(token)).cloned()
    }

    /// Looks up a consumption by digest rather than by raw token.
    pub fn consumption_by_digest(&self, digest: &str) -> Option<CredentialDigest> {
        self.read().consumed.get(digest).cloned()
    }

    pub fn append_fork(
        &self,
        session_id: &str,
        branch_id: &str,
        parent_branch_id: &str,
        forked_from_seq: u64,
    ) -> Result<(), LogError> {
        let mut sink = self.lock_sink();
        let entry = JournalEntry::Fork(ForkEntry {
            session_id: session_id.to_owned(),
            branch_id: branch_id.to_owned(),
            parent_branch_id: parent_branch_id.to_owned(),
            forked_from_seq,
            forked_at: self.clock.now_ms(),
        });
        self.commit(&mut sink, entry)
    }

    pub fn records(&self) -> Vec<EffectRecord> {
        self.read().records.clone()
    }

    pub fn query(&self, filter: &RecordFilter) -> Vec<EffectRecord> {
        self.read()
            .records
            .iter()
            .filter(|r| filter.matches(r))
            .cloned()
            .collect()
    }

    pub fn session_records(&self, session_id: &str) -> Vec<EffectRecord> {
        self.query(&RecordFilter {
            session_id: Some(session_id.to_owned()),
            ..RecordFilter::default()
        })
    }

    pub fn consumed(&self) -> Vec<CredentialDigest> {
        self.read().consumed.values().cloned().collect()
    }

    pub fn forks(&self, session_id: &str) -> Vec<ForkEntry> {
        self.read()
            .forks
            .iter()
            .filter(|f| f.session_id == session_id)
            .cloned()
            .collect()
    }

    /// Records a refused call for audit. `blocked_at` is filled in here.
    pub fn append_blocked(&self, mut entry: BlockedEntry) -> Result<(), LogError> {
        let mut sink = self.lock_sink();
        entry.blocked_at = self.clock.now_ms();
        self.commit(&mut sink, JournalEntry::Blocked(entry))
    }

    pub fn blocked(&self) -> Vec<BlockedEntry> {
        self.read().blocked.clone()
    }

    pub fn branch_in_use(&self, session_id: &str, branch_id: &str) -> bool {
        let state = self.read();
        state
            .records
            .iter()
            .any(|r| r.session_id == session_id && r.branch_id == branch_id)
            || state
                .forks
                .iter()
                .any(|f| f.session_id == session_id && (f.branch_id == branch_id || f.parent_branch_id == branch_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::io;
    use std::sync::atomic::{AtomicBool, Ordering};

    fn call(branch: &str, seq: u64, tool: &str) -> ToolCall {
        ToolCall {
            session_id: "s1".into(),
            branch_id: branch.into(),
            seq_index: seq,
            tool_name: tool.into(),
            arguments: json!({"amount": 500, "recipient": "Bob"}),
            wire_id: json!(seq),
        }
    }

    fn policy(tool: &str) -> ToolPolicy {
        ToolPolicy::irreversible(tool)
    }

    fn ancestry(branches: &[&str]) -> Vec<String> {
        branches.iter().map(|b| b.to_string()).collect()
    }

    #[test]
    fn first_append_is_pending_record_one() {
        let log = EffectLog::in_memory();
        let id = log
            .append_pending(&call("b0", 2, "transfer"), None, &policy("transfer"), BTreeMap::new())
            .unwrap();
        assert_eq!(id, 1);
        assert_eq!(log.get(1).unwrap().outcome, Outcome::Unknown);
    }

    #[test]
    fn duplicate_identity_rejected() {
        let log = EffectLog::in_memory();
        let c = call("b0", 2, "transfer");
        log.append_pending(&c, None, &policy("transfer"), BTreeMap::new()).unwrap();
        let err = log
            .append_pending(&c, None, &policy("transfer"), BTreeMap::new())
            .unwrap_err();
        assert!(matches!(err, LogError::DuplicateKey { seq_index: 2, .. }));
    }

    #[test]
    fn reversible_policy_is_not_journaled() {
        let log = EffectLog::in_memory();
        let err = log
            .append_pending(
                &call("b0", 0, "get_balance"),
                None,
                &ToolPolicy::reversible("get_balance"),
                BTreeMap::new(),
            )
            .unwrap_err();
        assert!(matches!(err, LogError::NotIrreversible(_)));
    }

    #[test]
    fn finalize_once() {
        let log = EffectLog::in_memory();
        let id = log
            .append_pending(&call("b0", 0, "transfer"), None, &policy("transfer"), BTreeMap::new())
            .unwrap();
        log.finalize(id, json!({"status": "ok", "txn": "T100"}), Outcome::Succeeded)
            .unwrap();
        let rec = log.get(id).unwrap();
        assert_eq!(rec.response, json!({"status": "ok", "txn": "T100"}));
        assert_eq!(rec.outcome, Outcome::Succeeded);
        assert!(matches!(
            log.finalize(id, json!({}), Outcome::Succeeded),
            Err(LogError::AlreadyFinalized(1))
        ));
        assert!(matches!(
            log.finalize(42, json!({}), Outcome::Failed),
            Err(LogError::NotFound(42))
        ));
        assert!(matches!(
            log.finalize(id, json!({}), Outcome::Unknown),
            Err(LogError::UnknownOutcome)
        ));
    }

    #[test]
    fn candidate_lookup() {
        let log = EffectLog::in_memory();
        log.append_pending(&call("b0", 2, "transfer"), None, &policy("transfer"), BTreeMap::new())
            .unwrap();
        log.append_pending(&call("b1", 3, "transfer"), Some("b0"), &policy("transfer"), BTreeMap::new())
            .unwrap();
        let rec = log
            .find_candidate("s1", &ancestry(&["b0"]), 2, "transfer")
            .unwrap();
        assert_eq!((rec.branch_id.as_str(), rec.seq_index), ("b0", 2));
        assert!(log
            .find_candidate("s1", &ancestry(&["b0"]), 2, "create_server")
            .is_none());
        assert!(log.find_candidate("s1", &ancestry(&["b0"]), 5, "transfer").is_none());
        assert!(log.find_candidate("s2", &ancestry(&["b0"]), 2, "transfer").is_none());
        let rec = log
            .find_candidate("s1", &ancestry(&["b1", "b0"]), 2, "transfer")
            .unwrap();
        assert_eq!(rec.branch_id, "b0");
        assert_eq!(
            log.record_at("s1", &ancestry(&["b0"]), 2).unwrap().tool_name,
            "transfer"
        );
    }

    /// Exhaustive oracle: scan every record for the nearest ancestor match.
    #[test]
    fn candidate_lookup_matches_exhaustive_scan() {
        let log = EffectLog::in_memory();
        let tools = ["transfer", "create_server", "delete_data"];
        let branches = ["b0", "b1", "b2"];
        for (i, b) in branches.iter().enumerate() {
            for seq in 0..6u64 {
                if (seq + i as u64).is_multiple_of(3) {
                    continue;
                }
                let tool = tools[(seq as usize + i) % tools.len()];
                log.append_pending(&call(b, seq, tool), None, &policy(tool), BTreeMap::new())
                    .unwrap();
            }
        }
        let all = log.records();
        let lineages = [ancestry(&["b2", "b1", "b0"]), ancestry(&["b1", "b0"]), ancestry(&["b0"])];
        for lineage in &lineages {
            for seq in 0..8u64 {
                for tool in tools {
                    let expected = lineage.iter().find_map(|b| {
                        all.iter().find(|r| {
                            r.branch_id == *b && r.seq_index == seq && r.tool_name == tool
                        })
                    });
                    let got = log.find_candidate("s1", lineage, seq, tool);
                    assert_eq!(got.as_ref(), expected, "{lineage:?} seq={seq} tool={tool}");
                }
            }
        }
    }

    #[test]
    fn consumption_registry() {
        let log = EffectLog::in_memory();
        assert!(!log.is_consumed("TOK-abc"));
        let id = log
            .append_pending(&call("b0", 0, "delete_data"), None, &policy("delete_data"), BTreeMap::new())
            .unwrap();
        let creds = vec![Credential {
            source_field: "token".into(),
            token: "TOK-abc".into(),
        }];
        log.mark_consumed(&creds, id).unwrap();
        log.mark_consumed(&creds, id).unwrap();
        assert!(log.is_consumed("TOK-abc"));
        assert_eq!(log.consumed().len(), 1);
        assert_eq!(log.get(id).unwrap().consumed_credentials.len(), 1);
        assert!(!log.is_consumed(""));
        assert!(matches!(log.mark_consumed(&creds, 99), Err(LogError::NotFound(99))));
    }

    #[test]
    fn digest_hides_token() {
        let d = credential_digest("TOK-abc");
        assert!(d.starts_with("sha256:"));
        assert!(!d.contains("TOK-abc"));
        assert_eq!(d.len(), "sha256:".len() + 64);
    }

    struct FlakySink {
        fail: Arc<AtomicBool>,
    }

    impl JournalSink for FlakySink {
        fn append(&mut self, _line: &[u8]) -> io::Result<()> {
            if self.fail.load(Ordering::SeqCst) {
                Err(io::Error::other("disk full"))
            } else {
                Ok(())
            }
        }
    }

    #[test]
    fn storage_failure_leaves_no_phantom_record() {
        let fail = Arc::new(AtomicBool::new(true));
        let log = EffectLog::with_sink(Box::new(FlakySink { fail: fail.clone() }), Arc::new(SystemClock));
        let err = log
            .append_pending(&call("b0", 0, "transfer"), None, &policy("transfer"), BTreeMap::new())
            .unwrap_err();
        assert!(matches!(err, LogError::StorageFailure(_)));
        assert!(log.records().is_empty());
        fail.store(false, Ordering::SeqCst);
        let id = log
            .append_pending(&call("b0", 0, "transfer"), None, &policy("transfer"), BTreeMap::new())
            .unwrap();
        assert_eq!(id, 1);
    }

    #[test]
    fn reload_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        {
            let log = EffectLog::open(&path).unwrap();
            let id = log
                .append_pending(&call("b0", 0, "delete_data"), None, &policy("delete_data"), BTreeMap::new())
                .unwrap();
            log.finalize(id, json!({"result": {"ok": true}}), Outcome::Succeeded).unwrap();
            log.mark_consumed(
                &[Credential {
                    source_field: "token".into(),
                    token: "TOK-abc".into(),
                }],
                id,
            )
            .unwrap();
            log.append_pending(&call("b0", 1, "transfer"), None, &policy("transfer"), BTreeMap::new())
                .unwrap();
            log.append_fork("s1", "b1", "b0", 1).unwrap();
        }
        let log = EffectLog::open(&path).unwrap();
        assert!(log.is_consumed("TOK-abc"));
        assert_eq!(log.get(1).unwrap().outcome, Outcome::Succeeded);
        assert_eq!(log.get(2).unwrap().outcome, Outcome::Unknown);
        assert_eq!(log.forks("s1").len(), 1);
        assert!(log.branch_in_use("s1", "b1"));
        let next = log
            .append_pending(&call("b1", 1, "transfer"), Some("b0"), &policy("transfer"), BTreeMap::new())
            .unwrap();
        assert_eq!(next, 3);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("TOK-abc"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn torn_tail_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        {
            let log = EffectLog::open(&path).unwrap();
            log.append_pending(&call("b0", 0, "transfer"), None, &policy("transfer"), BTreeMap::new())
                .unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(br#"{"entry":"pending","record_id":2,"sess"#);
        std::fs::write(&path, &bytes).unwrap();
        let log = EffectLog::open(&path).unwrap();
        assert_eq!(log.records().len(), 1);
        log.append_pending(&call("b0", 1, "transfer"), None, &policy("transfer"), BTreeMap::new())
            .unwrap();
        drop(log);
        let view = JournalView::load(&path).unwrap();
        assert_eq!(view.records.len(), 2);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        std::fs::write(&path, "not json\n{}\n").unwrap();
        assert!(matches!(EffectLog::open(&path), Err(LogError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn unterminated_but_complete_tail_gets_a_newline() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        {
            let log = EffectLog::open(&path).unwrap();
            log.append_pending(&call("b0", 0, "transfer"), None, &policy("transfer"), BTreeMap::new())
                .unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        let log = EffectLog::open(&path).unwrap();
        log.append_pending(&call("b0", 1, "transfer"), None, &policy("transfer"), BTreeMap::new())
            .unwrap();
        drop(log);
        assert_eq!(JournalView::load(&path).unwrap().records.len(), 2);
    }

    #[test]
    fn missing_journal_view_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(JournalView::load(&dir.path().join("nope.log")).is_err());
    }
}
