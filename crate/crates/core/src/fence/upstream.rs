//! Connections to the tool servers behind the fence.

use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use crate::protocol::{
    decode_message, encode_message, Message, MessageKind, ProtocolError, TOOLS_LIST,
};
use crate::transport::{write_frame, FrameReader, CONTENT_TYPE};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UpstreamError {
    #[error("upstream `{name}` transport failure: {message}")]
    Transport { name: String, message: String },
    #[error("upstream `{name}` sent an invalid frame: {source}")]
    Protocol {
        name: String,
        source: ProtocolError,
    },
    #[error("no upstream serves tool `{0}`")]
    NoRoute(String),
}

/// One tool server. `exchange` sends a message and, for requests, waits for
/// the matching response.
pub trait Upstream: Send + Sync {
    fn name(&self) -> &str;
    fn exchange(&self, msg: &Message) -> Result<Option<Message>, UpstreamError>;
}

pub struct HttpUpstream {
    name: String,
    url: String,
    agent: ureq::Agent,
}

impl HttpUpstream {
    pub fn new(name: impl Into<String>, url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            name: name.into(),
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    fn transport(&self, message: impl ToString) -> UpstreamError {
        UpstreamError::Transport {
            name: self.name.clone(),
            message: message.to_string(),
        }
    }
}

impl Upstream for HttpUpstream {
    fn name(&self) -> &str {
        &self.name
    }

    fn exchange(&self, msg: &Message) -> Result<Option<Message>, UpstreamError> {
        let body = encode_message(msg);
        let resp = self
            .agent
            .post(&self.url)
            .set("Content-Type", CONTENT_TYPE)
            .send_bytes(&body)
            .map_err(|e| self.transport(e))?;
        let text = resp.into_string().map_err(|e| self.transport(e))?;
        if text.trim().is_empty() {
            return Ok(None);
        }
        decode_message(text.as_bytes())
            .map(Some)
            .map_err(|source| UpstreamError::Protocol {
                name: self.name.clone(),
                source,
            })
    }
}

struct StdioChild {
    child: Child,
    stdin: ChildStdin,
    reader: FrameReader<BufReader<ChildStdout>>,
}

/// A tool server spawned as a child process speaking newline-delimited
/// frames on its stdin/stdout.
pub struct StdioUpstream {
    name: String,
    inner: Mutex<StdioChild>,
}

impl StdioUpstream {
    pub fn spawn(name: impl Into<String>, command: &[String]) -> Result<Self, UpstreamError> {
        let name = name.into();
        let (program, args) = command.split_first().ok_or_else(|| UpstreamError::Transport {
            name: name.clone(),
            message: "empty command".into(),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| UpstreamError::Transport {
                name: name.clone(),
                message: format!("cannot spawn `{program}`: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            name,
            inner: Mutex::new(StdioChild {
                child,
                stdin,
                reader: FrameReader::new(BufReader::new(stdout)),
            }),
        })
    }
}

impl Upstream for StdioUpstream {
    fn name(&self) -> &str {
        &self.name
    }

    fn exchange(&self, msg: &Message) -> Result<Option<Message>, UpstreamError> {
        let transport = |message: String| UpstreamError::Transport {
            name: self.name.clone(),
            message,
        };
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        write_frame(&mut inner.stdin, msg).map_err(|e| transport(e.to_string()))?;
        if msg.kind != MessageKind::Request {
            return Ok(None);
        }
        loop {
            let frame = inner
                .reader
                .read_frame()
                .map_err(|e| transport(e.to_string()))?
                .ok_or_else(|| transport("server closed its output".into()))?;
            let reply = decode_message(&frame).map_err(|source| UpstreamError::Protocol {
                name: self.name.clone(),
                source,
            })?;
            if reply.kind == MessageKind::Response && reply.id == msg.id {
                return Ok(Some(reply));
            }
            tracing::debug!(upstream = %self.name, "skipping unsolicited server frame");
        }
    }
}

impl Drop for StdioUpstream {
    fn drop(&mut self) {
        let inner = self.inner.get_mut().unwrap_or_else(|e| e.into_inner());
        let _ = inner.stdin.flush();
        let _ = inner.child.kill();
        let _ = inner.child.wait();
    }
}

/// Routes tool calls to the upstream that advertised the tool. Other traffic
/// goes to the first (primary) upstream, except `tools/list`, which is
/// merged when there is more than one upstream.
#[derive(Clone)]
pub struct Router {
    upstreams: Vec<Arc<dyn Upstream>>,
    routes: BTreeMap<String, usize>,
}

impl Router {
    /// Sends everything to one upstream without asking it for its tools.
    pub fn single(upstream: Arc<dyn Upstream>) -> Self {
        Self {
            upstreams: vec![upstream],
            routes: BTreeMap::new(),
        }
    }

    pub fn with_routes(upstreams: Vec<Arc<dyn Upstream>>, routes: BTreeMap<String, usize>) -> Self {
        Self { upstreams, routes }
    }

    /// Performs the MCP handshake with every upstream and learns which tools
    /// each one serves. Any unreachable upstream fails the whole router.
    pub fn discover(upstreams: Vec<Arc<dyn Upstream>>) -> Result<Self, UpstreamError> {
        let mut routes = BTreeMap::new();
        for (idx, up) in upstreams.iter().enumerate() {
            let init = Message::request(
                "acrfence-init",
                "initialize",
                Some(json!({
                    "protocolVersion": "2024-11-05",
                    "capabilities": {},
                    "clientInfo": {"name": "acrfence", "version": env!("CARGO_PKG_VERSION")}
                })),
            );
            expect_response(up.as_ref(), &init)?;
            up.exchange(&Message::notification("notifications/initialized", None))?;
            let list = expect_response(up.as_ref(), &Message::request("acrfence-tools", TOOLS_LIST, None))?;
            let tools = list
                .result
                .as_ref()
                .and_then(|r| r.get("tools"))
                .and_then(Value::as_array)
                .cloned()
                .unwrap_or_default();
            for tool in tools {
                if let Some(name) = tool.get("name").and_then(Value::as_str) {
                    if routes.contains_key(name) {
                        tracing::warn!(tool = name, upstream = up.name(), "tool served by several upstreams; first wins");
                        continue;
                    }
                    routes.insert(name.to_owned(), idx);
                }
            }
        }
        Ok(Self { upstreams, routes })
    }

    pub fn upstreams(&self) -> &[Arc<dyn Upstream>] {
        &self.upstreams
    }

    fn target(&self, tool: &str) -> Result<&Arc<dyn Upstream>, UpstreamError> {
        match self.routes.get(tool) {
            Some(&idx) => Ok(&self.upstreams[idx]),
            None if self.upstreams.len() == 1 => Ok(&self.upstreams[0]),
            None => Err(UpstreamError::NoRoute(tool.to_owned())),
        }
    }

    pub fn upstream_name(&self, tool: &str) -> Option<&str> {
        self.target(tool).ok().map(|u| u.name())
    }

    pub fn call_tool(&self, tool: &str, msg: &Message) -> Result<Message, UpstreamError> {
        let up = self.target(tool)?;
        expect_response(up.as_ref(), msg)
    }

    pub fn passthrough(&self, msg: &Message) -> Result<Option<Message>, UpstreamError> {
        let primary = self
            .upstreams
            .first()
            .ok_or_else(|| UpstreamError::NoRoute("(no upstreams)".into()))?;
        if self.upstreams.len() > 1
            && msg.kind == MessageKind::Request
            && msg.method.as_deref() == Some(TOOLS_LIST)
        {
            let mut merged = Vec::new();
            for up in &self.upstreams {
                let reply = expect_response(up.as_ref(), msg)?;
                if let Some(tools) = reply
                    .result
                    .as_ref()
                    .and_then(|r| r.get("tools"))
                    .and_then(Value::as_array)
                {
                    merged.extend(tools.iter().cloned());
                }
            }
            let id = msg.id.clone().unwrap_or(Value::Null);
            return Ok(Some(Message::response(id, json!({ "tools": merged }))));
        }
        primary.exchange(msg)
    }
}

fn expect_response(up: &dyn Upstream, msg: &Message) -> Result<Message, UpstreamError> {
    up.exchange(msg)?.ok_or_else(|| UpstreamError::Transport {
        name: up.name().to_owned(),
        message: "no response to a request".into(),
    })
}
