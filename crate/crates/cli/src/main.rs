//! `acrfence`: run the fence, run scenario suites, inspect journals and
//! approve forks.

mod logview;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use acrfence_core::effectlog::{JournalView, RecordFilter};
use acrfence_core::fence::config::{FenceConfig, ListenTransport};
use acrfence_core::fence::control::{ControlClient, ControlRequest};
use acrfence_core::fence::proxy::{run_proxy, ProxyError};
use acrfence_simlab::script::Transport;
use acrfence_simlab::{preset, preset_names, run_suite, SuiteConfig, SuiteError, SuiteOptions, SuiteReport};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_UNAVAILABLE: u8 = 3;

#[derive(Parser)]
#[command(name = "acrfence", version, about = "Tool-boundary fence for checkpoint-restored agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fence in front of the configured upstream servers.
    Serve(ServeArgs),
    /// Run a scenario suite (a built-in preset or a TOML file) and print the table.
    Scenario(ScenarioArgs),
    /// Print journal records and the credential cross-reference.
    Log(LogArgs),
    /// Show a session's pending fork, or approve it with --token and --branch.
    Fork(ForkArgs),
    /// Render a saved scenario report.
    Report(ReportArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// Fence configuration file.
    #[arg(long, short, env = "ACRFENCE_CONFIG")]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set fence.fsync=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Http,
    InProcess,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Preset name or path to a suite file.
    suite: String,
    /// Where journals and reports go. Defaults to a temporary directory
    /// that is removed afterwards.
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Run fenced scenarios with replay switched off (negative control).
    #[arg(long)]
    disable_replay: bool,
    /// Override the suite's transport.
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Also write the machine-readable report here.
    #[arg(long, value_name = "PATH")]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct LogArgs {
    /// Journal file.
    journal: PathBuf,
    #[arg(long)]
    session: Option<String>,
    #[arg(long)]
    branch: Option<String>,
    #[arg(long)]
    tool: Option<String>,
    /// Emit one JSON document instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ForkArgs {
    /// Control surface address.
    #[arg(long, env = "ACRFENCE_CONTROL", default_value = "127.0.0.1:7401")]
    control: String,
    #[arg(long)]
    session: String,
    /// Fork token from the blocked call.
    #[arg(long, requires = "branch")]
    token: Option<String>,
    /// New branch id.
    #[arg(long, requires = "token")]
    branch: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// A report written by `scenario --json` or found in its work directory.
    report: PathBuf,
    #[arg(long)]
    json: bool,
    /// Exit 1 when the report has failing scenarios.
    #[arg(long)]
    strict: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Blocked calls are expected during scenario runs; the table reports them.
    let default_level = match cli.command {
        Command::Serve(_) => "info",
        _ => "error",
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    let code = match cli.command {
        Command::Serve(args) => serve(args),
        Command::Scenario(args) => scenario(args),
        Command::Log(args) => log(args),
        Command::Fork(args) => fork(args),
        Command::Report(args) => report(args),
    };
    ExitCode::from(code)
}

fn fail(code: u8, message: impl std::fmt::Display) -> u8 {
    eprintln!("acrfence: {message}");
    code
}

fn serve(args: ServeArgs) -> u8 {
    let config = match FenceConfig::load(&args.config, &args.overrides) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        if let Err(e) = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)) {
            return fail(EXIT_FAILED, format!("cannot install signal handler: {e}"));
        }
    }
    let upstreams: Vec<String> = config
        .upstreams
        .iter()
        .map(|u| match (&u.url, &u.command) {
            (Some(url), _) => format!("{} ({url})", u.name),
            (None, Some(cmd)) => format!("{} (stdio: {})", u.name, cmd.join(" ")),
            (None, None) => u.name.clone(),
        })
        .collect();
    let transport = config.listen.transport;
    let result = run_proxy(&config, stop, |data, control| {
        let listen = match (transport, data) {
            (ListenTransport::Http, Some(addr)) => format!("http on http://{addr}/mcp"),
            _ => "stdio".to_owned(),
        };
        eprintln!(
            "acrfence listening: {listen}; control on {control}; upstreams: {}",
            upstreams.join(", ")
        );
    });
    match result {
        Ok(()) => 0,
        Err(e @ (ProxyError::Config(_) | ProxyError::Policy(_) | ProxyError::Journal(_))) => fail(EXIT_CONFIG, e),
        Err(e) if e.is_bind_or_upstream() => fail(EXIT_UNAVAILABLE, e),
        Err(e) => fail(EXIT_FAILED, e),
    }
}

fn load_suite(name: &str) -> Result<SuiteConfig, String> {
    if let Some(parsed) = preset(name) {
        return parsed.map_err(|e| e.to_string());
    }
    let path = Path::new(name);
    if !path.exists() {
        let presets: Vec<&str> = preset_names().collect();
        return Err(format!("`{name}` is neither a preset ({}) nor a file", presets.join(", ")));
    }
    SuiteConfig::load(path).map_err(|e| e.to_string())
}

fn scenario(args: ScenarioArgs) -> u8 {
    let suite = match load_suite(&args.suite) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let scratch;
    let workdir = match &args.workdir {
        Some(dir) => dir.clone(),
        None => match tempfile::Builder::new().prefix("acrfence-scenario").tempdir() {
            Ok(dir) => {
                scratch = dir;
                scratch.path().to_owned()
            }
            Err(e) => return fail(EXIT_FAILED, format!("cannot create a work directory: {e}")),
        },
    };
    let opts = SuiteOptions {
        workdir: workdir.clone(),
        disable_replay: args.disable_replay,
        transport: args.transport.map(|t| match t {
            TransportArg::Http => Transport::Http,
            TransportArg::InProcess => Transport::InProcess,
        }),
    };
    let report = match run_suite(&suite, &opts) {
        Ok(r) => r,
        Err(e @ SuiteError::Scenario(_)) => return fail(EXIT_CONFIG, e),
        Err(e) => return fail(EXIT_FAILED, e),
    };
    print!("{}", report.to_table());
    let json = report.to_json();
    let mut targets = Vec::new();
    if args.workdir.is_some() {
        targets.push(workdir.join("report.json"));
    }
    targets.extend(args.json.clone());
    for path in targets {
        if let Err(e) = std::fs::write(&path, &json) {
            return fail(EXIT_FAILED, format!("cannot write {}: {e}", path.display()));
        }
    }
    if report.passed {
        0
    } else {
        EXIT_FAILED
    }
}

fn log(args: LogArgs) -> u8 {
    let view = match JournalView::load(&args.journal) {
        Ok(v) => v,
        Err(e) => return fail(EXIT_CONFIG, format!("cannot read journal: {e}")),
    };
    let filter = RecordFilter {
        session_id: args.session,
        branch_id: args.branch,
        tool_name: args.tool,
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&logview::to_json(&view, &filter)).expect("json"));
    } else {
        print!("{}", logview::to_text(&view, &filter));
    }
    0
}

fn fork(args: ForkArgs) -> u8 {
    let client = ControlClient::new(args.control.clone());
    let request = match (&args.token, &args.branch) {
        (Some(token), Some(branch)) => ControlRequest::ApproveFork {
            session_id: args.session.clone(),
            fork_token: token.clone(),
            new_branch_id: branch.clone(),
        },
        _ => ControlRequest::PendingFork {
            session_id: args.session.clone(),
        },
    };
    let response = match client.call(&request) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_UNAVAILABLE, format!("control surface {}: {e}", args.control)),
    };
    if let Some(err) = &response.error {
        let hint = match err.kind.as_str() {
            "NoPendingFork" => " (nothing is blocked on this session; the fork may already be approved)",
            "TokenMismatch" => " (the token is stale or was already used; check `acrfence fork --session ...`)",
            _ => "",
        };
        return fail(EXIT_FAILED, format!("{}: {}{hint}", err.kind, err.message));
    }
    let result = response.result.unwrap_or_default();
    match request {
        ControlRequest::ApproveFork { .. } => {
            println!("session {} now on branch {}", args.session, result["current_branch_id"].as_str().unwrap_or("?"));
            println!("lineage:");
            for link in result["lineage"].as_array().into_iter().flatten() {
                match link["parent_branch_id"].as_str() {
                    Some(parent) => println!(
                        "  {} <- {} at seq {}",
                        link["branch_id"].as_str().unwrap_or("?"),
                        parent,
                        link["forked_from_seq"]
                    ),
                    None => println!("  {} (root)", link["branch_id"].as_str().unwrap_or("?")),
                }
            }
        }
        _ => println!("{}", serde_json::to_string_pretty(&result).expect("json")),
    }
    0
}

fn report(args: ReportArgs) -> u8 {
    let parsed = std::fs::read_to_string(&args.report)
        .map_err(|e| e.to_string())
        .and_then(|text| serde_json::from_str::<SuiteReport>(&text).map_err(|e| e.to_string()));
    let report = match parsed {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, format!("cannot read report {}: {e}", args.report.display())),
    };
    if args.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    if args.strict && !report.passed {
        EXIT_FAILED
    } else {
        0
    }
}
