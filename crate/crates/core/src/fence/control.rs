//! Operator control surface: a local TCP listener, separate from the agent's
//! data path, speaking one JSON document per line in each direction.
//!
//! Requests carry an `op` of `register_restore`, `approve_fork`,
//! `query_log`, `pending_fork` or `session`. Responses are
//! `{"ok": true, "result": ...}` or `{"ok": false, "error": {"kind", "message"}}`.

use std::io::{self, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::Fence;
use crate::effectlog::RecordFilter;
use crate::protocol::{canonical_bytes, parse_strict};
use crate::transport::FrameReader;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ControlRequest {
    RegisterRestore {
        session_id: String,
        checkpoint_seq: u64,
    },
    ApproveFork {
        session_id: String,
        fork_token: String,
        new_branch_id: String,
    },
    QueryLog {
        #[serde(default)]
        session_id: Option<String>,
        #[serde(default)]
        branch_id: Option<String>,
        #[serde(default)]
        tool_name: Option<String>,
    },
    PendingFork {
        session_id: String,
    },
    Session {
        session_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ControlErrorBody>,
}

impl ControlResponse {
    fn ok(result: Value) -> Self {
        Self {
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    fn err(kind: &str, message: impl Into<String>) -> Self {
        Self {
            ok: false,
            result: None,
            error: Some(ControlErrorBody {
                kind: kind.to_owned(),
                message: message.into(),
            }),
        }
    }

    pub fn error_kind(&self) -> Option<&str> {
        self.error.as_ref().map(|e| e.kind.as_str())
    }
}

pub fn dispatch(fence: &Fence, request: ControlRequest) -> ControlResponse {
    match request {
        ControlRequest::RegisterRestore {
            session_id,
            checkpoint_seq,
        } => match fence.register_restore(&session_id, checkpoint_seq) {
            Ok(info) => ControlResponse::ok(json!(info)),
            Err(e) => ControlResponse::err(e.kind(), e.to_string()),
        },
        ControlRequest::ApproveFork {
            session_id,
            fork_token,
            new_branch_id,
        } => match fence.approve_fork(&session_id, &fork_token, &new_branch_id) {
            Ok(lineage) => ControlResponse::ok(json!({
                "session_id": session_id,
                "current_branch_id": new_branch_id,
                "lineage": lineage,
            })),
            Err(e) => ControlResponse::err(e.kind(), e.to_string()),
        },
        ControlRequest::QueryLog {
            session_id,
            branch_id,
            tool_name,
        } => {
            let records = fence.log().query(&RecordFilter {
                session_id,
                branch_id,
                tool_name,
            });
            ControlResponse::ok(json!({ "records": records }))
        }
        ControlRequest::PendingFork { session_id } => match fence.session_snapshot(&session_id) {
            None => ControlResponse::err("UnknownSession", format!("unknown session `{session_id}`")),
            Some(state) => match state.pending_fork {
                Some(p) => ControlResponse::ok(p.payload),
                None => ControlResponse::err(
                    "NoPendingFork",
                    format!("no fork is pending for session `{session_id}`"),
                ),
            },
        },
        ControlRequest::Session { session_id } => match fence.session_snapshot(&session_id) {
            None => ControlResponse::err("UnknownSession", format!("unknown session `{session_id}`")),
            Some(state) => ControlResponse::ok(json!({
                "session_id": state.session_id,
                "current_branch_id": state.current_branch_id,
                "lineage": state.branch_lineage,
                "next_seq_index": state.next_seq_index,
                "restore_frontier": state.restore_frontier,
                "pending_fork": state.pending_fork.is_some(),
            })),
        },
    }
}

pub fn handle_line(fence: &Fence, line: &[u8]) -> ControlResponse {
    let request = parse_strict(line)
        .map_err(|e| e.to_string())
        .and_then(|v| serde_json::from_value::<ControlRequest>(v).map_err(|e| e.to_string()));
    match request {
        Ok(req) => dispatch(fence, req),
        Err(message) => ControlResponse::err("BadRequest", message),
    }
}

fn serve_connection(fence: &Fence, stream: TcpStream) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    let mut writer = stream.try_clone()?;
    let mut reader = FrameReader::new(BufReader::new(stream));
    while let Some(line) = reader.read_frame()? {
        let response = handle_line(fence, &line);
        let mut bytes = canonical_bytes(&json!(response));
        bytes.push(b'\n');
        writer.write_all(&bytes)?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts control connections until `shutdown` is set.
pub fn serve_control(listener: TcpListener, fence: Arc<Fence>, shutdown: Arc<AtomicBool>) {
    if let Err(e) = listener.set_nonblocking(true) {
        tracing::error!(error = %e, "control listener unusable");
        return;
    }
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let fence = fence.clone();
                thread::spawn(move || {
                    if let Err(e) = serve_connection(&fence, stream) {
                        tracing::debug!(%peer, error = %e, "control connection closed");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
            Err(e) => {
                tracing::warn!(error = %e, "control accept failed");
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

/// Blocking client for the control surface.
#[derive(Debug, Clone)]
pub struct ControlClient {
    addr: String,
    timeout: Duration,
}

impl ControlClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            timeout: Duration::from_secs(10),
        }
    }

    pub fn call(&self, request: &ControlRequest) -> io::Result<ControlResponse> {
        let addr = self
            .addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        let mut writer = stream.try_clone()?;
        let mut line = canonical_bytes(&json!(request));
        line.push(b'\n');
        writer.write_all(&line)?;
        writer.flush()?;
        let mut reader = FrameReader::new(BufReader::new(stream));
        let frame = reader
            .read_frame()?
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "control surface closed"))?;
        serde_json::from_slice(&frame).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}
