//! The scripted agent: a sequential executor with checkpoint-restore and
//! seeded regeneration of its calls.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use acrfence_core::fence::control::{ControlClient, ControlRequest};
use acrfence_core::fence::{codes, Fence, Router, REPLAY_MARKER};
use acrfence_core::protocol::{decode_message, encode_message, Message, MessageKind};
use acrfence_core::transport::{CONTENT_TYPE, SESSION_HEADER};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::resynth::Resynthesizer;
use crate::script::{OnFork, RestoreSignal, ScenarioConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("control surface: {0}")]
    Control(String),
}

/// How the agent reaches its tools, and the operator hooks of a fence if
/// there is one.
pub trait AgentLink {
    fn send(&mut self, msg: &Message) -> Result<Option<Message>, LinkError>;
    fn register_restore(&mut self, checkpoint_seq: u64) -> Result<(), LinkError>;
    fn approve_fork(&mut self, fork_token: &str, new_branch_id: &str) -> Result<(), LinkError>;
}

/// Straight to the servers, no fence.
pub struct DirectLink {
    router: Router,
}

impl DirectLink {
    pub fn new(router: Router) -> Self {
        Self { router }
    }
}

impl AgentLink for DirectLink {
    fn send(&mut self, msg: &Message) -> Result<Option<Message>, LinkError> {
        let tool = msg
            .is_tool_call()
            .then(|| msg.params.as_ref()?.get("name")?.as_str().map(str::to_owned))
            .flatten();
        match tool {
            Some(tool) => self.router.call_tool(&tool, msg).map(Some),
            None => self.router.passthrough(msg),
        }
        .map_err(|e| LinkError::Transport(e.to_string()))
    }

    fn register_restore(&mut self, _: u64) -> Result<(), LinkError> {
        Ok(())
    }

    fn approve_fork(&mut self, _: &str, _: &str) -> Result<(), LinkError> {
        Err(LinkError::Control("no fence to approve a fork on".into()))
    }
}

/// An in-process fence.
pub struct FenceLink {
    fence: Arc<Fence>,
    session_id: String,
}

impl FenceLink {
    pub fn new(fence: Arc<Fence>, session_id: impl Into<String>) -> Self {
        Self {
            fence,
            session_id: session_id.into(),
        }
    }
}

impl AgentLink for FenceLink {
    fn send(&mut self, msg: &Message) -> Result<Option<Message>, LinkError> {
        Ok(self.fence.handle_message(&self.session_id, msg.clone()))
    }

    fn register_restore(&mut self, checkpoint_seq: u64) -> Result<(), LinkError> {
        self.fence.open_session(&self.session_id);
        self.fence
            .register_restore(&self.session_id, checkpoint_seq)
            .map(|_| ())
            .map_err(|e| LinkError::Control(e.to_string()))
    }

    fn approve_fork(&mut self, fork_token: &str, new_branch_id: &str) -> Result<(), LinkError> {
        self.fence
            .approve_fork(&self.session_id, fork_token, new_branch_id)
            .map(|_| ())
            .map_err(|e| LinkError::Control(e.to_string()))
    }
}

/// A fence (or server) over HTTP, with an optional control surface.
pub struct HttpLink {
    url: String,
    session_id: String,
    agent: ureq::Agent,
    control: Option<ControlClient>,
}

impl HttpLink {
    pub fn new(url: impl Into<String>, session_id: impl Into<String>, control: Option<ControlClient>) -> Self {
        Self {
            url: url.into(),
            session_id: session_id.into(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
            control,
        }
    }

    fn control(&self, request: ControlRequest) -> Result<Value, LinkError> {
        let client = self
            .control
            .as_ref()
            .ok_or_else(|| LinkError::Control("no control surface".into()))?;
        let resp = client.call(&request).map_err(|e| LinkError::Control(e.to_string()))?;
        match (resp.ok, resp.result, resp.error) {
            (true, result, _) => Ok(result.unwrap_or(Value::Null)),
            (false, _, Some(err)) => Err(LinkError::Control(format!("{}: {}", err.kind, err.message))),
            (false, _, None) => Err(LinkError::Control("request refused".into())),
        }
    }
}

impl AgentLink for HttpLink {
    fn send(&mut self, msg: &Message) -> Result<Option<Message>, LinkError> {
        let resp = self
            .agent
            .post(&self.url)
            .set("Content-Type", CONTENT_TYPE)
            .set(SESSION_HEADER, &self.session_id)
            .send_bytes(&encode_message(msg))
            .map_err(|e| LinkError::Transport(e.to_string()))?;
        let body = resp.into_string().map_err(|e| LinkError::Transport(e.to_string()))?;
        if body.trim().is_empty() {
            return Ok(None);
        }
        decode_message(body.as_bytes())
            .map(Some)
            .map_err(|e| LinkError::Transport(e.to_string()))
    }

    fn register_restore(&mut self, checkpoint_seq: u64) -> Result<(), LinkError> {
        if self.control.is_none() {
            return Ok(());
        }
        self.control(ControlRequest::RegisterRestore {
            session_id: self.session_id.clone(),
            checkpoint_seq,
        })
        .map(|_| ())
    }

    fn approve_fork(&mut self, fork_token: &str, new_branch_id: &str) -> Result<(), LinkError> {
        self.control(ControlRequest::ApproveFork {
            session_id: self.session_id.clone(),
            fork_token: fork_token.to_owned(),
            new_branch_id: new_branch_id.to_owned(),
        })
        .map(|_| ())
    }
}

/// How the agent saw one call come back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CallOutcome {
    Ok,
    Replayed,
    ToolError,
    Malformed,
    BlockedForkRequired,
    BlockedCredentialReuse,
    RpcError,
    LinkFailure,
}

impl CallOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ok => "Ok",
            Self::Replayed => "Replayed",
            Self::ToolError => "ToolError",
            Self::Malformed => "Malformed",
            Self::BlockedForkRequired => "BlockedForkRequired",
            Self::BlockedCredentialReuse => "BlockedCredentialReuse",
            Self::RpcError => "RpcError",
            Self::LinkFailure => "LinkFailure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    /// 0 before any restore, incremented by each restore.
    pub generation: u32,
    pub step: usize,
    pub tool: String,
    pub arguments: Value,
    pub wire_id: i64,
    pub outcome: CallOutcome,
    /// `{"result": ..}` or `{"error": ..}` as received.
    pub response: Value,
    /// Journal record a replayed response came from.
    pub replayed_from: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub calls: Vec<CallRecord>,
    pub crashes: u32,
    pub restores: u32,
    pub rollbacks: u32,
    pub forks_approved: u32,
    pub completed: bool,
    pub aborted: Option<String>,
}

impl Transcript {
    pub fn count(&self, outcome: CallOutcome) -> usize {
        self.calls.iter().filter(|c| c.outcome == outcome).count()
    }
}

/// Agent-local state; this is what a checkpoint saves.
#[derive(Debug, Clone, Default)]
struct AgentState {
    step: usize,
    vars: BTreeMap<String, Value>,
    /// Tool calls the agent has completed; the fence's position counter.
    calls_made: u64,
    next_wire_id: i64,
}

const MAX_FORKS: u32 = 8;
const MAX_CALLS: usize = 512;

pub struct ScriptedAgent<'a> {
    scenario: &'a ScenarioConfig,
    trial: u64,
    resynth: Resynthesizer,
}

impl<'a> ScriptedAgent<'a> {
    pub fn new(scenario: &'a ScenarioConfig, trial: u64, resynth: Resynthesizer) -> Self {
        Self {
            scenario,
            trial,
            resynth,
        }
    }

    /// MCP handshake, then the script. Link failures end the run and are
    /// recorded in the transcript.
    pub fn run(mut self, link: &mut dyn AgentLink) -> Transcript {
        let mut transcript = Transcript::default();
        if let Err(e) = handshake(link) {
            transcript.aborted = Some(format!("handshake failed: {e}"));
            return transcript;
        }
        if let Err(reason) = self.execute(link, &mut transcript) {
            transcript.aborted = Some(reason);
        } else {
            transcript.completed = true;
        }
        transcript
    }

    fn execute(&mut self, link: &mut dyn AgentLink, t: &mut Transcript) -> Result<(), String> {
        let sc = self.scenario;
        let checkpoint_at = sc.checkpoint.unwrap_or(0);
        let mut state = AgentState {
            next_wire_id: 1,
            ..AgentState::default()
        };
        let mut snapshot: Option<AgentState> = None;
        let mut generation = 0u32;
        let mut reissue: Option<Value> = None;

        loop {
            if t.calls.len() >= MAX_CALLS {
                return Err("call limit reached".into());
            }
            if state.step == checkpoint_at && snapshot.is_none() {
                snapshot = Some(state.clone());
            }
            if state.step == sc.steps.len() {
                match &snapshot {
                    Some(saved) if t.rollbacks < sc.rollbacks => {
                        t.rollbacks += 1;
                        generation += 1;
                        state = saved.clone();
                        self.signal_restore(link, &state)?;
                        continue;
                    }
                    _ => return Ok(()),
                }
            }
            let step = &sc.steps[state.step];
            let arguments = match reissue.take() {
                Some(args) => args,
                None => self.render(state.step, generation, &state.vars)?,
            };
            let wire_id = state.next_wire_id;
            state.next_wire_id += 1;
            let msg = Message::tool_call(wire_id, &step.tool, arguments.clone());
            let (outcome, response, replayed_from) = match link.send(&msg) {
                Ok(Some(reply)) => interpret(&reply),
                Ok(None) => (CallOutcome::LinkFailure, Value::Null, None),
                Err(e) => (CallOutcome::LinkFailure, json!({ "link_error": e.to_string() }), None),
            };
            t.calls.push(CallRecord {
                generation,
                step: state.step,
                tool: step.tool.clone(),
                arguments: arguments.clone(),
                wire_id,
                outcome,
                response: response.clone(),
                replayed_from,
            });
            match outcome {
                CallOutcome::Ok | CallOutcome::Replayed | CallOutcome::ToolError => {
                    state.calls_made += 1;
                    if outcome != CallOutcome::ToolError {
                        let structured = &response["result"]["structuredContent"];
                        for (var, path) in &step.capture {
                            let value = lookup(structured, path)
                                .ok_or_else(|| format!("step {} result lacks `{path}`", state.step))?;
                            state.vars.insert(var.clone(), value.clone());
                        }
                    }
                    state.step += 1;
                }
                CallOutcome::Malformed => {
                    t.crashes += 1;
                    match (&snapshot, sc.restore) {
                        (Some(saved), true) => {
                            t.restores += 1;
                            generation += 1;
                            state = saved.clone();
                            self.signal_restore(link, &state)?;
                        }
                        _ => return Err(format!("crashed on a malformed `{}` reply", step.tool)),
                    }
                }
                CallOutcome::BlockedForkRequired => {
                    let token = response["error"]["data"]["fork_token"].as_str().map(str::to_owned);
                    match (sc.on_fork, token) {
                        (OnFork::Approve, Some(token)) if t.forks_approved < MAX_FORKS => {
                            t.forks_approved += 1;
                            let branch = format!("fork-{}", t.forks_approved);
                            link.approve_fork(&token, &branch).map_err(|e| e.to_string())?;
                            reissue = Some(arguments);
                        }
                        _ => return Err(format!("`{}` blocked: fork required", step.tool)),
                    }
                }
                CallOutcome::BlockedCredentialReuse => {
                    return Err(format!("`{}` blocked: credential already consumed", step.tool))
                }
                CallOutcome::RpcError => return Err(format!("`{}` failed: {}", step.tool, response["error"])),
                CallOutcome::LinkFailure => return Err(format!("`{}` got no reply", step.tool)),
            }
        }
    }

    fn signal_restore(&self, link: &mut dyn AgentLink, state: &AgentState) -> Result<(), String> {
        match self.scenario.restore_signal {
            RestoreSignal::Explicit => link.register_restore(state.calls_made).map_err(|e| e.to_string()),
            RestoreSignal::Implicit => Ok(()),
        }
    }

    /// Instantiates a step's arguments for one generation.
    fn render(&mut self, step_index: usize, generation: u32, vars: &BTreeMap<String, Value>) -> Result<Value, String> {
        let step = &self.scenario.steps[step_index];
        let mut args = step.args.clone();
        self.fill(&mut args, &format!("s{step_index}"), generation, vars)?;
        if let Some((path, value)) = self.resynth.mutation(&step.tool, generation, self.trial) {
            set_path(&mut args, path, value.clone());
        }
        Ok(args)
    }

    fn fill(&mut self, value: &mut Value, slot: &str, generation: u32, vars: &BTreeMap<String, Value>) -> Result<(), String> {
        match value {
            Value::String(s) if s == "$uuid" => *value = Value::String(self.resynth.reference_id(slot)),
            Value::String(s) if s.starts_with("$text:") => {
                let key = s["$text:".len()..].to_owned();
                *value = Value::String(self.resynth.text(&key, generation));
            }
            Value::String(s) if s.starts_with("$var:") => {
                let name = &s["$var:".len()..];
                *value = vars.get(name).cloned().ok_or_else(|| format!("variable `{name}` is not set"))?;
            }
            Value::Array(items) => {
                for (i, item) in items.iter_mut().enumerate() {
                    self.fill(item, &format!("{slot}.{i}"), generation, vars)?;
                }
            }
            Value::Object(map) => {
                for (k, v) in map.iter_mut() {
                    self.fill(v, &format!("{slot}.{k}"), generation, vars)?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn handshake(link: &mut dyn AgentLink) -> Result<(), LinkError> {
    let init = Message::request(
        "init",
        "initialize",
        Some(json!({"protocolVersion": "2024-11-05", "capabilities": {}, "clientInfo": {"name": "scripted-agent"}})),
    );
    link.send(&init)?
        .filter(|m| m.result.is_some())
        .ok_or_else(|| LinkError::Transport("initialize was not answered".into()))?;
    link.send(&Message::notification("notifications/initialized", None))?;
    link.send(&Message::request("tools", "tools/list", None))?
        .filter(|m| m.result.is_some())
        .ok_or_else(|| LinkError::Transport("tools/list was not answered".into()))?;
    Ok(())
}

fn interpret(reply: &Message) -> (CallOutcome, Value, Option<u64>) {
    if reply.kind != MessageKind::Response {
        return (CallOutcome::LinkFailure, Value::Null, None);
    }
    if let Some(err) = &reply.error {
        let outcome = match err.code {
            codes::FORK_REQUIRED => CallOutcome::BlockedForkRequired,
            codes::CREDENTIAL_REUSE => CallOutcome::BlockedCredentialReuse,
            _ => CallOutcome::RpcError,
        };
        return (outcome, json!({ "error": err.to_value() }), None);
    }
    let result = reply.result.clone().unwrap_or(Value::Null);
    let response = json!({ "result": result });
    let replayed_from = reply
        .extra
        .get(REPLAY_MARKER)
        .and_then(|m| m.get("record_id"))
        .and_then(Value::as_u64);
    let outcome = if result.get("isError").and_then(Value::as_bool) == Some(true) {
        CallOutcome::ToolError
    } else if !result.get("structuredContent").is_some_and(Value::is_object) {
        CallOutcome::Malformed
    } else if replayed_from.is_some() {
        CallOutcome::Replayed
    } else {
        CallOutcome::Ok
    };
    (outcome, response, replayed_from)
}

fn lookup<'v>(value: &'v Value, path: &str) -> Option<&'v Value> {
    path.split('.').try_fold(value, |v, seg| match v {
        Value::Object(map) => map.get(seg),
        Value::Array(items) => items.get(seg.parse::<usize>().ok()?),
        _ => None,
    })
}

fn set_path(value: &mut Value, path: &str, new: Value) {
    let mut cursor = value;
    let segments: Vec<&str> = path.split('.').collect();
    for seg in &segments[..segments.len() - 1] {
        if !cursor.get(*seg).is_some_and(Value::is_object) {
            cursor[*seg] = json!({});
        }
        cursor = cursor.get_mut(*seg).expect("just inserted");
    }
    cursor[segments[segments.len() - 1]] = new;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths() {
        let v = json!({"a": {"b": [1, {"c": 2}]}});
        assert_eq!(lookup(&v, "a.b.1.c"), Some(&json!(2)));
        assert_eq!(lookup(&v, "a.x"), None);
        let mut w = json!({"target": "Alice"});
        set_path(&mut w, "target", json!("Bob"));
        set_path(&mut w, "meta.who", json!("x"));
        assert_eq!(w, json!({"target": "Bob", "meta": {"who": "x"}}));
    }

    #[test]
    fn interprets_replies() {
        let ok = Message::response(json!(1), json!({"structuredContent": {"a": 1}}));
        assert_eq!(interpret(&ok).0, CallOutcome::Ok);
        let bad = Message::response(json!(1), json!({"content": []}));
        assert_eq!(interpret(&bad).0, CallOutcome::Malformed);
        let tool_err = Message::response(json!(1), json!({"isError": true, "content": []}));
        assert_eq!(interpret(&tool_err).0, CallOutcome::ToolError);
        let mut replayed = ok.clone();
        replayed.extra.insert(REPLAY_MARKER.into(), json!({"record_id": 4}));
        assert_eq!(interpret(&replayed), (CallOutcome::Replayed, json!({"result": {"structuredContent": {"a": 1}}}), Some(4)));
        let blocked = Message::error_response(
            json!(1),
            acrfence_core::protocol::RpcError::new(codes::CREDENTIAL_REUSE, "x"),
        );
        assert_eq!(interpret(&blocked).0, CallOutcome::BlockedCredentialReuse);
    }
}
