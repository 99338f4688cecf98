//! The enforcement core.
//!
//! Each tool call goes through one pipeline: extract the call, resolve its
//! policy, refuse consumed credentials, then either journal-and-forward it
//! (normal path) or compare it against the journal (restore path). On the
//! restore path nothing is ever forwarded: the call is either answered from
//! the journal or held until a fork is approved.

pub mod config;
pub mod control;
pub mod proxy;
mod session;
pub mod upstream;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::classifier::{
    analyze_external, classify, leaves, Analyzer, Credential, FieldClass, PolicySet, ToolPolicy,
    Verdict, VerdictKind,
};
use crate::clock::{Clock, SystemClock};
use crate::effectlog::{credential_digest, BlockedEntry, CredentialDigest, EffectLog, EffectRecord, LogError, Outcome};
use crate::protocol::{extract_tool_call, Message, MessageKind, ProtocolError, RpcError, ToolCall};

pub use session::{BranchLink, PendingFork, SessionState};
pub use upstream::{HttpUpstream, Router, StdioUpstream, Upstream, UpstreamError};

/// JSON-RPC error codes used on the data path.
pub mod codes {
    pub const FORK_REQUIRED: i64 = -32010;
    pub const CREDENTIAL_REUSE: i64 = -32011;
    pub const UPSTREAM_FAILURE: i64 = -32020;
    pub const JOURNAL_FAILURE: i64 = -32021;
    pub const INVALID_REQUEST: i64 = -32600;
    pub const INVALID_PARAMS: i64 = -32602;
}

/// Top-level member added to replayed responses.
pub const REPLAY_MARKER: &str = "acrfence";

#[derive(Debug, Error)]
pub enum FenceError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` already registered")]
    SessionExists(String),
    #[error("message is not a tools/call request")]
    NotAToolCall,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("journal: {0}")]
    Journal(#[from] LogError),
    #[error("upstream failed after journaling (record {record_id:?}): {source}")]
    UpstreamFailure {
        record_id: Option<u64>,
        source: UpstreamError,
    },
    #[error("checkpoint {requested} is beyond the session's progress ({limit})")]
    FutureCheckpoint { requested: u64, limit: u64 },
    #[error("no fork is pending for session `{0}`")]
    NoPendingFork(String),
    #[error("fork token does not match the pending fork")]
    TokenMismatch,
    #[error("branch `{0}` is already in use in this session")]
    BranchIdInUse(String),
}

impl FenceError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) => "UnknownSession",
            Self::SessionExists(_) => "SessionExists",
            Self::NotAToolCall => "NotAToolCall",
            Self::Protocol(ProtocolError::MissingToolName) => "MissingToolName",
            Self::Protocol(ProtocolError::MalformedFrame(_)) => "MalformedFrame",
            Self::Protocol(ProtocolError::ProtocolViolation(_)) => "ProtocolViolation",
            Self::Journal(LogError::StorageFailure(_)) => "StorageFailure",
            Self::Journal(_) => "JournalError",
            Self::UpstreamFailure { .. } => "UpstreamFailure",
            Self::FutureCheckpoint { .. } => "FutureCheckpoint",
            Self::NoPendingFork(_) => "NoPendingFork",
            Self::TokenMismatch => "TokenMismatch",
            Self::BranchIdInUse(_) => "BranchIdInUse",
        }
    }

    fn to_rpc(&self) -> RpcError {
        let code = match self {
            Self::Protocol(ProtocolError::MissingToolName) => codes::INVALID_PARAMS,
            Self::Protocol(_) | Self::NotAToolCall => codes::INVALID_REQUEST,
            Self::UpstreamFailure { .. } => codes::UPSTREAM_FAILURE,
            _ => codes::JOURNAL_FAILURE,
        };
        let mut data = json!({ "fence_error": self.kind() });
        if let Self::UpstreamFailure {
            record_id: Some(id),
            ..
        } = self
        {
            data["record_id"] = json!(id);
            data["outcome"] = json!("Unknown");
        }
        RpcError::new(code, self.to_string()).with_data(data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeKind {
    Forwarded,
    Replayed,
    BlockedForkRequired,
    BlockedCredentialReuse,
}

impl OutcomeKind {
    pub fn is_blocked(self) -> bool {
        matches!(self, Self::BlockedForkRequired | Self::BlockedCredentialReuse)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Forwarded => "Forwarded",
            Self::Replayed => "Replayed",
            Self::BlockedForkRequired => "BlockedForkRequired",
            Self::BlockedCredentialReuse => "BlockedCredentialReuse",
        }
    }
}

/// Result of one fenced tool call.
///
/// `response` holds the server response envelope (`{"result": ..}` or
/// `{"error": ..}`) for forwarded and replayed calls, and the structured
/// error payload for blocked ones.
#[derive(Debug, Clone, PartialEq)]
pub struct FenceOutcome {
    pub kind: OutcomeKind,
    pub response: Value,
    pub record_id: Option<u64>,
    pub verdict: Option<Verdict>,
    pub fork_token: Option<String>,
    upstream_reply: Option<Message>,
}

impl FenceOutcome {
    /// The JSON-RPC response the agent receives.
    pub fn to_message(&self, wire_id: Value) -> Message {
        match self.kind {
            OutcomeKind::Forwarded => match &self.upstream_reply {
                Some(reply) => reply.clone(),
                None => envelope_message(wire_id, &self.response),
            },
            OutcomeKind::Replayed => {
                let mut msg = envelope_message(wire_id, &self.response);
                msg.extra.insert(
                    REPLAY_MARKER.into(),
                    json!({
                        "outcome": "Replayed",
                        "record_id": self.record_id,
                        "note": "recorded response returned without re-execution; embedded timestamps are from the original call",
                    }),
                );
                msg
            }
            OutcomeKind::BlockedForkRequired => Message::error_response(
                wire_id,
                RpcError::new(codes::FORK_REQUIRED, "blocked: fork required").with_data(self.response.clone()),
            ),
            OutcomeKind::BlockedCredentialReuse => Message::error_response(
                wire_id,
                RpcError::new(codes::CREDENTIAL_REUSE, "blocked: credential already consumed")
                    .with_data(self.response.clone()),
            ),
        }
    }
}

fn envelope_message(wire_id: Value, envelope: &Value) -> Message {
    if let Some(error) = envelope.get("error") {
        let rpc = serde_json::from_value::<RpcError>(error.clone())
            .unwrap_or_else(|_| RpcError::new(codes::UPSTREAM_FAILURE, "recorded error"));
        Message::error_response(wire_id, rpc)
    } else {
        Message::response(wire_id, envelope.get("result").cloned().unwrap_or(Value::Null))
    }
}

/// Splits an upstream reply into the journaled envelope and outcome.
/// Results flagged `isError` count as failed calls.
pub fn reply_envelope(reply: &Message) -> (Value, Outcome) {
    match (&reply.result, &reply.error) {
        (_, Some(err)) => (json!({ "error": err.to_value() }), Outcome::Failed),
        (Some(result), None) => {
            let failed = result.get("isError").and_then(Value::as_bool) == Some(true);
            let outcome = if failed { Outcome::Failed } else { Outcome::Succeeded };
            (json!({ "result": result }), outcome)
        }
        (None, None) => (json!({ "result": null }), Outcome::Failed),
    }
}

#[derive(Debug, Clone)]
pub struct FenceOptions {
    /// Treat a regressing numeric wire id as a silent restore.
    pub implicit_restore: bool,
    /// Negative control: skip the restore path and forward everything.
    pub replay_disabled: bool,
    pub default_branch: String,
    pub proxy_host: String,
}

impl Default for FenceOptions {
    fn default() -> Self {
        Self {
            implicit_restore: true,
            replay_disabled: false,
            default_branch: "b0".into(),
            proxy_host: std::env::var("HOSTNAME").unwrap_or_else(|_| "localhost".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoreInfo {
    pub session_id: String,
    pub next_seq_index: u64,
    pub restore_frontier: Option<u64>,
}

pub struct Fence {
    log: Arc<EffectLog>,
    policies: PolicySet,
    router: Router,
    analyzer: Option<Arc<dyn Analyzer>>,
    clock: Arc<dyn Clock>,
    options: FenceOptions,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionState>>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Fence {
    pub fn new(log: Arc<EffectLog>, policies: PolicySet, router: Router) -> Self {
        Self {
            log,
            policies,
            router,
            analyzer: None,
            clock: Arc::new(SystemClock),
            options: FenceOptions::default(),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_analyzer(mut self, analyzer: Arc<dyn Analyzer>) -> Self {
        self.analyzer = Some(analyzer);
        self
    }

    pub fn with_options(mut self, options: FenceOptions) -> Self {
        self.options = options;
        self
    }

    pub fn log(&self) -> &Arc<EffectLog> {
        &self.log
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    /// Registers a new session rooted at `branch_id`.
    pub fn register_session(&self, session_id: &str, branch_id: &str) -> Result<(), FenceError> {
        let mut sessions = lock(&self.sessions);
        if sessions.contains_key(session_id) {
            return Err(FenceError::SessionExists(session_id.to_owned()));
        }
        sessions.insert(
            session_id.to_owned(),
            Arc::new(Mutex::new(SessionState::new(session_id, branch_id))),
        );
        Ok(())
    }

    /// Returns the session, creating it on first sight. A session the
    /// journal already knows (e.g. after a proxy restart) is rebuilt from its
    /// fork entries, with the counter placed after its last journaled call.
    pub fn open_session(&self, session_id: &str) -> Arc<Mutex<SessionState>> {
        let mut sessions = lock(&self.sessions);
        sessions
            .entry(session_id.to_owned())
            .or_insert_with(|| Arc::new(Mutex::new(self.recover_session(session_id))))
            .clone()
    }

    fn recover_session(&self, session_id: &str) -> SessionState {
        let forks = self.log.forks(session_id);
        let records = self.log.session_records(session_id);
        let root = forks
            .first()
            .map(|f| f.parent_branch_id.clone())
            .or_else(|| records.first().map(|r| r.branch_id.clone()))
            .unwrap_or_else(|| self.options.default_branch.clone());
        let mut state = SessionState::new(session_id, root);
        for fork in forks {
            if fork.parent_branch_id != state.current_branch_id {
                tracing::warn!(session_id, branch = %fork.branch_id, "fork entry does not extend the lineage; ignored");
                continue;
            }
            state.branch_lineage.push(BranchLink {
                branch_id: fork.branch_id.clone(),
                parent_branch_id: Some(fork.parent_branch_id),
                forked_from_seq: fork.forked_from_seq,
            });
            state.current_branch_id = fork.branch_id;
        }
        if let Some(max) = self.max_visible_seq(&state) {
            state.next_seq_index = max + 1;
            tracing::info!(session_id, next_seq = max + 1, "session recovered from journal");
        }
        state
    }

    fn session(&self, session_id: &str) -> Result<Arc<Mutex<SessionState>>, FenceError> {
        lock(&self.sessions)
            .get(session_id)
            .cloned()
            .ok_or_else(|| FenceError::UnknownSession(session_id.to_owned()))
    }

    pub fn session_snapshot(&self, session_id: &str) -> Option<SessionState> {
        lock(&self.sessions)
            .get(session_id)
            .map(|s| lock(s).clone())
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = lock(&self.sessions).keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Highest journaled position visible from the session's lineage.
    fn max_visible_seq(&self, state: &SessionState) -> Option<u64> {
        let mut seqs: Vec<u64> = self
            .log
            .session_records(&state.session_id)
            .iter()
            .map(|r| r.seq_index)
            .collect();
        seqs.sort_unstable();
        seqs.dedup();
        seqs.into_iter().rev().find(|&seq| {
            self.log
                .record_at(&state.session_id, &state.ancestry_for(seq), seq)
                .is_some()
        })
    }

    /// Tells the fence the agent was restored to the checkpoint taken before
    /// tool call `checkpoint_seq`.
    /// A session this process has not seen yet is recovered from the
    /// journal if the journal knows it.
    pub fn register_restore(&self, session_id: &str, checkpoint_seq: u64) -> Result<RestoreInfo, FenceError> {
        let session = match self.session(session_id) {
            Ok(s) => s,
            Err(e) if self.log.session_records(session_id).is_empty() && self.log.forks(session_id).is_empty() => {
                return Err(e)
            }
            Err(_) => self.open_session(session_id),
        };
        let mut state = lock(&session);
        self.restore_locked(&mut state, checkpoint_seq)
    }

    fn restore_locked(&self, state: &mut SessionState, checkpoint_seq: u64) -> Result<RestoreInfo, FenceError> {
        if checkpoint_seq > state.next_seq_index {
            return Err(FenceError::FutureCheckpoint {
                requested: checkpoint_seq,
                limit: state.next_seq_index,
            });
        }
        let frontier = self.max_visible_seq(state);
        state.rewind_to(checkpoint_seq, frontier);
        tracing::info!(
            session_id = %state.session_id,
            checkpoint_seq,
            frontier = ?state.restore_frontier,
            "restore registered"
        );
        Ok(RestoreInfo {
            session_id: state.session_id.clone(),
            next_seq_index: state.next_seq_index,
            restore_frontier: state.restore_frontier,
        })
    }

    /// Approves the pending fork: the session continues on `new_branch_id`
    /// from the blocked call's position. The blocked call is not executed;
    /// the agent re-issues it.
    pub fn approve_fork(
        &self,
        session_id: &str,
        fork_token: &str,
        new_branch_id: &str,
    ) -> Result<Vec<BranchLink>, FenceError> {
        let session = self.session(session_id)?;
        let mut state = lock(&session);
        let pending = state
            .pending_fork
            .as_ref()
            .ok_or_else(|| FenceError::NoPendingFork(session_id.to_owned()))?;
        if pending.token != fork_token {
            return Err(FenceError::TokenMismatch);
        }
        if new_branch_id.is_empty()
            || state.has_branch(new_branch_id)
            || self.log.branch_in_use(session_id, new_branch_id)
        {
            return Err(FenceError::BranchIdInUse(new_branch_id.to_owned()));
        }
        let fork_seq = pending.blocked_call.seq_index;
        let parent = state.current_branch_id.clone();
        self.log.append_fork(session_id, new_branch_id, &parent, fork_seq)?;
        state.branch_lineage.push(BranchLink {
            branch_id: new_branch_id.to_owned(),
            parent_branch_id: Some(parent),
            forked_from_seq: fork_seq,
        });
        state.current_branch_id = new_branch_id.to_owned();
        state.next_seq_index = fork_seq;
        state.restore_frontier = None;
        state.pending_fork = None;
        tracing::info!(session_id, branch = new_branch_id, fork_seq, "fork approved");
        Ok(state.branch_lineage.clone())
    }

    /// Data-path entry point: fences tool calls and passes everything else
    /// through. Returns `None` for notifications.
    pub fn handle_message(&self, session_id: &str, msg: Message) -> Option<Message> {
        if msg.is_tool_call() {
            self.open_session(session_id);
            let wire_id = msg.id.clone().unwrap_or(Value::Null);
            return Some(match self.handle_call(session_id, &msg) {
                Ok(outcome) => outcome.to_message(wire_id),
                Err(err) => {
                    tracing::warn!(session_id, error = %err, "tool call failed");
                    Message::error_response(wire_id, err.to_rpc())
                }
            });
        }
        match self.router.passthrough(&msg) {
            Ok(reply) => reply,
            Err(err) => {
                tracing::warn!(error = %err, "pass-through failed");
                (msg.kind == MessageKind::Request).then(|| {
                    Message::error_response(
                        msg.id.clone().unwrap_or(Value::Null),
                        RpcError::new(codes::UPSTREAM_FAILURE, err.to_string()),
                    )
                })
            }
        }
    }

    /// Runs one `tools/call` request through the fence.
    pub fn handle_call(&self, session_id: &str, msg: &Message) -> Result<FenceOutcome, FenceError> {
        if !msg.is_tool_call() {
            return Err(FenceError::NotAToolCall);
        }
        let session = self.session(session_id)?;
        let mut state = lock(&session);

        if let Some(pending) = &state.pending_fork {
            return Ok(FenceOutcome {
                kind: OutcomeKind::BlockedForkRequired,
                response: pending.payload.clone(),
                record_id: pending.verdict.candidate,
                verdict: Some(pending.verdict.clone()),
                fork_token: Some(pending.token.clone()),
                upstream_reply: None,
            });
        }

        if self.options.implicit_restore {
            if let Some(seq) = msg.id.as_ref().and_then(|id| state.regressed_to(id)) {
                tracing::warn!(session_id, seq, "wire id regressed; treating as a silent restore");
                self.restore_locked(&mut state, seq)?;
            }
        }

        let seq_before = state.next_seq_index;
        let call = extract_tool_call(msg, &mut state)?.ok_or(FenceError::NotAToolCall)?;
        let result = self.decide(&mut state, &call, msg);
        if let Ok(outcome) = &result {
            if outcome.kind.is_blocked() {
                self.audit_block(&call, outcome);
            }
        }
        let keep_seq = match &result {
            Ok(outcome) => !outcome.kind.is_blocked(),
            Err(FenceError::UpstreamFailure {
                record_id: Some(_), ..
            }) => true,
            Err(_) => false,
        };
        if keep_seq {
            state.note_progress(&call.wire_id, call.seq_index);
        } else {
            state.next_seq_index = seq_before;
        }
        result
    }

    fn decide(&self, state: &mut SessionState, call: &ToolCall, msg: &Message) -> Result<FenceOutcome, FenceError> {
        let policy = match self.policies.resolve(&call.tool_name) {
            Ok(policy) => policy,
            Err(missing) => {
                return Ok(blocked(
                    OutcomeKind::BlockedForkRequired,
                    json!({
                        "fence_outcome": "BlockedForkRequired",
                        "reason": "PolicyMissing",
                        "rationale": missing.to_string(),
                        "tool_name": call.tool_name,
                        "seq_index": call.seq_index,
                    }),
                    None,
                    None,
                ))
            }
        };

        let credentials = policy.extract_credentials(&call.arguments);
        let reused = self.consumed_credentials(&credentials);
        if !reused.is_empty() {
            return Ok(self.credential_block(call, &reused));
        }

        if !policy.irreversible {
            let reply = self.forward(call, msg, None)?;
            let (envelope, _) = reply_envelope(&reply);
            return Ok(forwarded(envelope, None, reply));
        }

        // Credentials are journaled and compared as digests only.
        let journaled = ToolCall {
            arguments: policy.redact_credentials(&call.arguments, credential_digest),
            ..call.clone()
        };
        if !self.options.replay_disabled && state.on_restore_path(call.seq_index) {
            return self.restore_path(state, &journaled, &policy);
        }

        let parent = state.parent_branch_id().map(str::to_owned);
        if self.options.replay_disabled
            && self
                .log
                .record_at(&call.session_id, std::slice::from_ref(&call.branch_id), call.seq_index)
                .is_some()
        {
            let reply = self.forward(call, msg, None)?;
            let (envelope, _) = reply_envelope(&reply);
            return Ok(forwarded(envelope, None, reply));
        }
        let env = self.env_context(&call.tool_name);
        let record_id = self
            .log
            .append_pending(&journaled, parent.as_deref(), &policy, env)?;
        let reply = match self.forward(call, msg, Some(record_id)) {
            Ok(reply) => reply,
            Err(err) => {
                // The effect may have happened; keep its credentials out of reach.
                if let Err(e) = self.log.mark_consumed(&credentials, record_id) {
                    tracing::error!(record_id, error = %e, "cannot mark credentials consumed");
                }
                return Err(err);
            }
        };
        let (envelope, outcome) = reply_envelope(&reply);
        self.log
            .finalize(record_id, policy.redact_response(&envelope, credential_digest), outcome)?;
        if outcome == Outcome::Succeeded {
            self.log.mark_consumed(&credentials, record_id)?;
        }
        Ok(forwarded(envelope, Some(record_id), reply))
    }

    /// `call` carries digests in place of credentials.
    fn restore_path(
        &self,
        state: &mut SessionState,
        call: &ToolCall,
        policy: &ToolPolicy,
    ) -> Result<FenceOutcome, FenceError> {
        let ancestry = state.ancestry_for(call.seq_index);
        let candidate = self
            .log
            .find_candidate(&call.session_id, &ancestry, call.seq_index, &call.tool_name)
            .or_else(|| self.log.record_at(&call.session_id, &ancestry, call.seq_index));
        let consumed = |digest: &str| self.log.consumption_by_digest(digest).is_some();
        let verdict = match (&candidate, &self.analyzer) {
            (Some(rec), Some(analyzer)) => analyze_external(call, rec, policy, analyzer.as_ref(), &consumed),
            _ => classify(call, candidate.as_ref(), policy, &consumed),
        };
        match (verdict.kind, candidate) {
            (VerdictKind::ReplayEquivalent, Some(rec)) if rec.outcome != Outcome::Unknown => {
                tracing::info!(session_id = %call.session_id, seq = call.seq_index, record_id = rec.record_id, "replaying recorded response");
                Ok(FenceOutcome {
                    kind: OutcomeKind::Replayed,
                    response: rec.response.clone(),
                    record_id: Some(rec.record_id),
                    verdict: Some(verdict),
                    fork_token: None,
                    upstream_reply: None,
                })
            }
            (VerdictKind::ReplayEquivalent, Some(rec)) => {
                let verdict = Verdict {
                    kind: VerdictKind::Divergent,
                    rationale: format!(
                        "record {} has outcome Unknown; the original call may or may not have taken effect",
                        rec.record_id
                    ),
                    ..verdict
                };
                Ok(self.fork_block(state, call, policy, verdict, Some(&rec)))
            }
            (VerdictKind::CredentialReuse, _) => {
                let reused: Vec<(Credential, CredentialDigest)> = policy
                    .extract_credentials(&call.arguments)
                    .into_iter()
                    .filter_map(|c| self.log.consumption_by_digest(&c.token).map(|d| (c, d)))
                    .collect();
                Ok(self.credential_block(call, &reused))
            }
            (_, candidate) => Ok(self.fork_block(state, call, policy, verdict, candidate.as_ref())),
        }
    }

    fn audit_block(&self, call: &ToolCall, outcome: &FenceOutcome) {
        let arguments = match self.policies.resolve(&call.tool_name) {
            Ok(policy) => policy.redact_credentials(&call.arguments, credential_digest),
            Err(_) => Value::Null,
        };
        let reused_digests = outcome.response["reused"]
            .as_array()
            .map(|items| items.iter().filter_map(|i| i["digest"].as_str().map(str::to_owned)).collect())
            .unwrap_or_default();
        let reason = outcome
            .verdict
            .as_ref()
            .map(|v| v.rationale.clone())
            .or_else(|| outcome.response["reason"].as_str().map(str::to_owned))
            .unwrap_or_default();
        let entry = BlockedEntry {
            session_id: call.session_id.clone(),
            branch_id: call.branch_id.clone(),
            seq_index: call.seq_index,
            tool_name: call.tool_name.clone(),
            arguments,
            outcome: outcome.kind.as_str().to_owned(),
            reason,
            reused_digests,
            prior_record: outcome.record_id,
            blocked_at: 0,
        };
        if let Err(e) = self.log.append_blocked(entry) {
            tracing::error!(session_id = %call.session_id, error = %e, "cannot journal blocked call");
        }
    }

    fn consumed_credentials(&self, credentials: &[Credential]) -> Vec<(Credential, CredentialDigest)> {
        credentials
            .iter()
            .filter_map(|c| self.log.consumption(&c.token).map(|d| (c.clone(), d)))
            .collect()
    }

    fn forward(&self, call: &ToolCall, msg: &Message, record_id: Option<u64>) -> Result<Message, FenceError> {
        self.router
            .call_tool(&call.tool_name, msg)
            .map_err(|source| FenceError::UpstreamFailure { record_id, source })
    }

    fn env_context(&self, tool: &str) -> BTreeMap<String, String> {
        let mut env = BTreeMap::new();
        env.insert("timestamp_ms".into(), self.clock.now_ms().to_string());
        env.insert("proxy_host".into(), self.options.proxy_host.clone());
        if let Some(name) = self.router.upstream_name(tool) {
            env.insert("upstream".into(), name.to_owned());
        }
        env
    }

    fn fork_block(
        &self,
        state: &mut SessionState,
        call: &ToolCall,
        policy: &ToolPolicy,
        verdict: Verdict,
        prior: Option<&EffectRecord>,
    ) -> FenceOutcome {
        let token = fork_token();
        let payload = json!({
            "fence_outcome": "BlockedForkRequired",
            "session_id": call.session_id,
            "branch_id": call.branch_id,
            "seq_index": call.seq_index,
            "tool_name": call.tool_name,
            "verdict": verdict,
            "prior_record": prior.map(|r| record_summary(r, policy)),
            "fork_token": token,
            "resolution": "approve a fork with a new branch id on the control surface, then re-issue the call",
        });
        tracing::warn!(session_id = %call.session_id, seq = call.seq_index, verdict = verdict.kind.as_str(), "call blocked pending fork");
        state.pending_fork = Some(PendingFork {
            token: token.clone(),
            blocked_call: call.clone(),
            verdict: verdict.clone(),
            payload: payload.clone(),
        });
        blocked(
            OutcomeKind::BlockedForkRequired,
            payload,
            prior.map(|r| r.record_id),
            Some(verdict),
        )
        .with_token(token)
    }

    fn credential_block(&self, call: &ToolCall, reused: &[(Credential, CredentialDigest)]) -> FenceOutcome {
        let first = reused.first().map(|(_, d)| d.consumed_by);
        let prior = first.and_then(|id| self.log.get(id));
        let prior_policy = prior
            .as_ref()
            .and_then(|r| self.policies.resolve(&r.tool_name).ok());
        let entries: Vec<Value> = reused
            .iter()
            .map(|(c, d)| {
                json!({
                    "source_field": c.source_field,
                    "digest": d.digest,
                    "consumed_by": d.consumed_by,
                    "consumed_at": d.consumed_at,
                })
            })
            .collect();
        let verdict = Verdict {
            kind: VerdictKind::CredentialReuse,
            candidate: None,
            diff: None,
            reused_tokens: Some(reused.iter().map(|(c, _)| c.source_field.clone()).collect()),
            rationale: format!(
                "credential already consumed by record {}",
                first.map(|id| id.to_string()).unwrap_or_default()
            ),
            source: crate::classifier::VerdictSource::RuleEngine,
        };
        tracing::warn!(session_id = %call.session_id, seq = call.seq_index, consumed_by = ?first, "consumed credential refused");
        blocked(
            OutcomeKind::BlockedCredentialReuse,
            json!({
                "fence_outcome": "BlockedCredentialReuse",
                "session_id": call.session_id,
                "seq_index": call.seq_index,
                "tool_name": call.tool_name,
                "reused": entries,
                "prior_record": match (&prior, &prior_policy) {
                    (Some(r), Some(p)) => record_summary(r, p),
                    (Some(r), None) => record_summary(r, &ToolPolicy::irreversible(&r.tool_name)),
                    _ => Value::Null,
                },
                "verdict": verdict,
            }),
            first,
            Some(verdict),
        )
    }
}

fn fork_token() -> String {
    let mut bytes = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

fn blocked(kind: OutcomeKind, payload: Value, record_id: Option<u64>, verdict: Option<Verdict>) -> FenceOutcome {
    FenceOutcome {
        kind,
        response: payload,
        record_id,
        verdict,
        fork_token: None,
        upstream_reply: None,
    }
}

fn forwarded(envelope: Value, record_id: Option<u64>, reply: Message) -> FenceOutcome {
    FenceOutcome {
        kind: OutcomeKind::Forwarded,
        response: envelope,
        record_id,
        verdict: None,
        fork_token: None,
        upstream_reply: Some(reply),
    }
}

impl FenceOutcome {
    fn with_token(mut self, token: String) -> Self {
        self.fork_token = Some(token);
        self
    }
}

/// Summary of a journaled record shown to the agent or operator: identity,
/// outcome, and the values of its intent fields.
pub fn record_summary(rec: &EffectRecord, policy: &ToolPolicy) -> Value {
    let mut intent = Map::new();
    for (path, leaf) in leaves(&rec.arguments) {
        if policy.field_class(&leaf.segments) == FieldClass::Intent {
            intent.insert(path, leaf.value.clone());
        }
    }
    json!({
        "record_id": rec.record_id,
        "tool_name": rec.tool_name,
        "branch_id": rec.branch_id,
        "seq_index": rec.seq_index,
        "outcome": rec.outcome,
        "intent_values": intent,
    })
}
