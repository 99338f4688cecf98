//! The long-running proxy: data path listener, control surface, and wiring
//! from configuration.

use std::io::{BufRead, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

use super::config::{ConfigError, FenceConfig, ListenTransport};
use super::control::serve_control;
use super::{Fence, FenceOptions, HttpUpstream, Router, StdioUpstream, Upstream, UpstreamError};
use crate::classifier::{HttpAnalyzer, PolicyError, PolicySet};
use crate::clock::SystemClock;
use crate::effectlog::{EffectLog, LogError};
use crate::protocol::{decode_message, encode_message, Message, RpcError};
use crate::transport::{write_frame, FrameReader, CONTENT_TYPE, SESSION_HEADER};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("cannot open journal: {0}")]
    Journal(#[from] LogError),
    #[error("cannot bind {addr}: {message}")]
    BindFailure { addr: String, message: String },
    #[error("refusing to start: {0}")]
    UpstreamUnreachable(UpstreamError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl ProxyError {
    /// Startup failures caused by the network rather than by configuration.
    pub fn is_bind_or_upstream(&self) -> bool {
        matches!(self, Self::BindFailure { .. } | Self::UpstreamUnreachable(_))
    }
}

/// Opens the journal, loads policies, connects to every upstream and builds
/// the fence. Fails if any upstream does not answer the handshake.
pub fn build_fence(config: &FenceConfig) -> Result<Fence, ProxyError> {
    let policies = PolicySet::load(&config.policies)?;
    let log = EffectLog::open_with(&config.journal, config.fence.fsync, Arc::new(SystemClock))?;
    let timeout = Duration::from_millis(config.fence.upstream_timeout_ms);
    let mut upstreams: Vec<Arc<dyn Upstream>> = Vec::new();
    for up in &config.upstreams {
        let upstream: Arc<dyn Upstream> = match (&up.url, &up.command) {
            (Some(url), _) => Arc::new(HttpUpstream::new(&up.name, url, timeout)),
            (None, Some(cmd)) => {
                Arc::new(StdioUpstream::spawn(&up.name, cmd).map_err(ProxyError::UpstreamUnreachable)?)
            }
            (None, None) => unreachable!("validated by config"),
        };
        upstreams.push(upstream);
    }
    let router = Router::discover(upstreams).map_err(ProxyError::UpstreamUnreachable)?;
    let options = FenceOptions {
        implicit_restore: config.fence.implicit_restore,
        default_branch: config.fence.default_branch.clone(),
        ..FenceOptions::default()
    };
    let mut fence = Fence::new(Arc::new(log), policies, router).with_options(options);
    if let Some(endpoint) = &config.analyzer {
        fence = fence.with_analyzer(Arc::new(HttpAnalyzer::from_endpoint(endpoint)));
    }
    Ok(fence)
}

fn bind(addr: &str) -> Result<TcpListener, ProxyError> {
    TcpListener::bind(addr).map_err(|e| ProxyError::BindFailure {
        addr: addr.to_owned(),
        message: e.to_string(),
    })
}

/// A running proxy. Dropping the handle does not stop it; call `shutdown`.
pub struct ProxyHandle {
    pub data_addr: Option<SocketAddr>,
    pub control_addr: SocketAddr,
    fence: Arc<Fence>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ProxyHandle {
    pub fn fence(&self) -> &Arc<Fence> {
        &self.fence
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        self.join();
    }

    /// Waits for the proxy threads to finish (after the stop flag is set).
    pub fn join(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }
}

const HTTP_WORKERS: usize = 4;

/// Starts the control surface and an HTTP data listener for `fence`.
pub fn start_http(fence: Arc<Fence>, data_addr: &str, control_addr: &str) -> Result<ProxyHandle, ProxyError> {
    let control = bind(control_addr)?;
    let control_addr = control.local_addr()?;
    let server = tiny_http::Server::http(data_addr).map_err(|e| ProxyError::BindFailure {
        addr: data_addr.to_owned(),
        message: e.to_string(),
    })?;
    let data_addr = server.server_addr().to_ip();
    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();
    {
        let (fence, stop) = (fence.clone(), stop.clone());
        threads.push(thread::spawn(move || serve_control(control, fence, stop)));
    }
    for _ in 0..HTTP_WORKERS {
        let (fence, stop, server) = (fence.clone(), stop.clone(), server.clone());
        threads.push(thread::spawn(move || http_worker(&server, &fence, &stop)));
    }
    Ok(ProxyHandle {
        data_addr,
        control_addr,
        fence,
        stop,
        threads,
    })
}

fn http_worker(server: &tiny_http::Server, fence: &Fence, stop: &AtomicBool) {
    while !stop.load(Ordering::SeqCst) {
        match server.recv_timeout(Duration::from_millis(100)) {
            Ok(Some(request)) => serve_http_request(fence, request),
            Ok(None) => {}
            Err(e) => {
                tracing::warn!(error = %e, "http receive failed");
                break;
            }
        }
    }
}

fn serve_http_request(fence: &Fence, mut request: tiny_http::Request) {
    let json_header = tiny_http::Header::from_bytes("Content-Type", CONTENT_TYPE).expect("static header");
    if *request.method() != tiny_http::Method::Post {
        let _ = request.respond(tiny_http::Response::empty(405));
        return;
    }
    let session = request
        .headers()
        .iter()
        .find(|h| h.field.equiv(SESSION_HEADER))
        .map(|h| h.value.as_str().to_owned())
        .unwrap_or_else(|| "default".to_owned());
    let mut body = Vec::new();
    if let Err(e) = request.as_reader().read_to_end(&mut body) {
        tracing::warn!(error = %e, "cannot read request body");
        let _ = request.respond(tiny_http::Response::empty(400));
        return;
    }
    let reply = match decode_message(&body) {
        Ok(msg) => fence.handle_message(&session, msg),
        Err(e) => Some(Message::error_response(Value::Null, RpcError::new(-32700, e.to_string()))),
    };
    let result = match reply {
        Some(reply) => request.respond(
            tiny_http::Response::from_data(encode_message(&reply)).with_header(json_header),
        ),
        None => request.respond(tiny_http::Response::empty(202)),
    };
    if let Err(e) = result {
        tracing::debug!(error = %e, "client went away");
    }
}

/// Serves one agent session over newline-delimited frames until EOF.
pub fn serve_stdio<R: BufRead, W: Write>(
    fence: &Fence,
    session_id: &str,
    input: R,
    mut output: W,
) -> std::io::Result<()> {
    let mut reader = FrameReader::new(input);
    while let Some(frame) = reader.read_frame()? {
        let reply = match decode_message(&frame) {
            Ok(msg) => fence.handle_message(session_id, msg),
            Err(e) => Some(Message::error_response(Value::Null, RpcError::new(-32700, e.to_string()))),
        };
        if let Some(reply) = reply {
            write_frame(&mut output, &reply)?;
        }
    }
    Ok(())
}

/// Builds the fence from `config` and serves until `stop` is set (HTTP) or
/// stdin closes (stdio). `on_ready` runs once everything is bound.
pub fn run_proxy(
    config: &FenceConfig,
    stop: Arc<AtomicBool>,
    on_ready: impl FnOnce(Option<SocketAddr>, SocketAddr),
) -> Result<(), ProxyError> {
    let fence = Arc::new(build_fence(config)?);
    match config.listen.transport {
        ListenTransport::Http => {
            let addr = config.listen.addr.as_deref().expect("validated by config");
            let handle = start_http(fence, addr, &config.control.addr)?;
            on_ready(handle.data_addr, handle.control_addr);
            while !stop.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(50));
            }
            handle.shutdown();
            Ok(())
        }
        ListenTransport::Stdio => {
            let control = bind(&config.control.addr)?;
            let control_addr = control.local_addr()?;
            let control_stop = Arc::new(AtomicBool::new(false));
            let control_thread = {
                let (fence, control_stop) = (fence.clone(), control_stop.clone());
                thread::spawn(move || serve_control(control, fence, control_stop))
            };
            on_ready(None, control_addr);
            let session = config.listen.session_id.clone().unwrap_or_else(|| "stdio".into());
            let stdin = std::io::stdin();
            let result = serve_stdio(&fence, &session, stdin.lock(), std::io::stdout().lock());
            control_stop.store(true, Ordering::SeqCst);
            let _ = control_thread.join();
            result.map_err(ProxyError::from)
        }
    }
}
