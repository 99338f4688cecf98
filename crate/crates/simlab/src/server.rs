//! Generic MCP front end for a `ToolService`: the JSON-RPC handshake,
//! `tools/list`, `tools/call` with per-tool request counters, and hosting
//! over HTTP, stdio or in process.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use acrfence_core::fence::{Upstream, UpstreamError};
use acrfence_core::protocol::{decode_message, encode_message, Message, MessageKind, RpcError};
use acrfence_core::transport::{write_frame, FrameReader, CONTENT_TYPE};
use serde_json::{json, Value};

use crate::services::{ToolOutcome, ToolService};

/// Text a crashing service sends instead of a structured result.
pub const MALFORMED_TEXT: &str = "\u{fffd}\u{fffd}receipt<<EOF";

struct Inner {
    service: Box<dyn ToolService>,
    counters: BTreeMap<String, u64>,
    tick: u64,
}

/// One mock tool server. Requests are handled one at a time.
pub struct MockServer {
    name: String,
    inner: Mutex<Inner>,
}

impl MockServer {
    pub fn new(service: impl ToolService + 'static) -> Arc<Self> {
        Arc::new(Self {
            name: service.name().to_owned(),
            inner: Mutex::new(Inner {
                service: Box::new(service),
                counters: BTreeMap::new(),
                tick: 0,
            }),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `tools/call` requests received per tool, including rejected ones.
    pub fn counters(&self) -> BTreeMap<String, u64> {
        self.lock().counters.clone()
    }

    pub fn count(&self, tool: &str) -> u64 {
        self.lock().counters.get(tool).copied().unwrap_or(0)
    }

    pub fn snapshot(&self) -> Value {
        self.lock().service.snapshot()
    }

    pub fn tool_names(&self) -> Vec<String> {
        self.lock().service.tools().iter().map(|t| t.name.to_owned()).collect()
    }

    /// Answers one message; notifications and stray responses get `None`.
    pub fn handle(&self, msg: &Message) -> Option<Message> {
        if msg.kind != MessageKind::Request {
            return None;
        }
        let id = msg.id.clone().unwrap_or(Value::Null);
        let method = msg.method.as_deref().unwrap_or_default();
        let mut inner = self.lock();
        let reply = match method {
            "initialize" => Message::response(
                id,
                json!({
                    "protocolVersion": "2024-11-05",
                    "capabilities": {"tools": {}},
                    "serverInfo": {"name": self.name, "version": env!("CARGO_PKG_VERSION")},
                }),
            ),
            "ping" => Message::response(id, json!({})),
            "tools/list" => {
                let tools: Vec<Value> = inner.service.tools().iter().map(|t| t.to_value()).collect();
                Message::response(id, json!({ "tools": tools }))
            }
            "tools/call" => {
                let params = msg.params.clone().unwrap_or(Value::Null);
                let tool = params.get("name").and_then(Value::as_str).unwrap_or_default().to_owned();
                let args = params.get("arguments").cloned().unwrap_or_else(|| json!({}));
                inner.tick += 1;
                let now = inner.tick;
                match inner.service.call(&tool, &args, now) {
                    None => Message::error_response(id, RpcError::new(-32602, format!("unknown tool `{tool}`"))),
                    Some(outcome) => {
                        *inner.counters.entry(tool).or_default() += 1;
                        Message::response(id, call_result(outcome))
                    }
                }
            }
            other => Message::error_response(id, RpcError::new(-32601, format!("method `{other}` not found"))),
        };
        Some(reply)
    }
}

fn call_result(outcome: ToolOutcome) -> Value {
    match outcome {
        ToolOutcome::Ok(value) => json!({
            "content": [{"type": "text", "text": value.to_string()}],
            "structuredContent": value,
        }),
        ToolOutcome::Err { code, message, data } => {
            let mut detail = json!({ "error": code, "message": message });
            if let Value::Object(extra) = data {
                detail.as_object_mut().expect("object").extend(extra);
            }
            json!({
                "content": [{"type": "text", "text": format!("{code}: {message}")}],
                "structuredContent": detail,
                "isError": true,
            })
        }
        ToolOutcome::Malformed => json!({
            "content": [{"type": "text", "text": MALFORMED_TEXT}],
        }),
    }
}

impl Upstream for MockServer {
    fn name(&self) -> &str {
        &self.name
    }

    fn exchange(&self, msg: &Message) -> Result<Option<Message>, UpstreamError> {
        Ok(self.handle(msg))
    }
}

/// Serves newline-delimited frames until EOF.
pub fn serve_stdio<R: BufRead, W: Write>(server: &MockServer, input: R, mut output: W) -> std::io::Result<()> {
    let mut reader = FrameReader::new(input);
    while let Some(frame) = reader.read_frame()? {
        let reply = match decode_message(&frame) {
            Ok(msg) => server.handle(&msg),
            Err(e) => Some(Message::error_response(Value::Null, RpcError::new(-32700, e.to_string()))),
        };
        if let Some(reply) = reply {
            write_frame(&mut output, &reply)?;
        }
    }
    Ok(())
}

/// A mock server listening on HTTP; stops when dropped.
pub struct HttpHost {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl HttpHost {
    pub fn start(server: Arc<MockServer>, addr: &str) -> std::io::Result<Self> {
        let http = tiny_http::Server::http(addr).map_err(|e| std::io::Error::new(std::io::ErrorKind::AddrInUse, e.to_string()))?;
        let addr = http
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::Unsupported, "not an IP listener"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                match http.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(request)) => respond(&server, request),
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        });
        Ok(Self {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/mcp", self.addr)
    }

    /// Blocks until the host stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for HttpHost {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn respond(server: &MockServer, mut request: tiny_http::Request) {
    let mut body = Vec::new();
    if request.as_reader().read_to_end(&mut body).is_err() {
        let _ = request.respond(tiny_http::Response::empty(400));
        return;
    }
    let reply = match decode_message(&body) {
        Ok(msg) => server.handle(&msg),
        Err(e) => Some(Message::error_response(Value::Null, RpcError::new(-32700, e.to_string()))),
    };
    let _ = match reply {
        Some(reply) => {
            let header = tiny_http::Header::from_bytes("Content-Type", CONTENT_TYPE).expect("static header");
            request.respond(tiny_http::Response::from_data(encode_message(&reply)).with_header(header))
        }
        None => request.respond(tiny_http::Response::empty(202)),
    };
}
