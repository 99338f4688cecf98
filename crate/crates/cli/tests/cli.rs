mod common;

use std::net::TcpListener;
use std::sync::Arc;

use acrfence_core::effectlog::EffectLog;
use acrfence_core::fence::control::{ControlClient, ControlRequest};
use acrfence_core::fence::proxy::start_http;
use acrfence_core::{Fence, Message};
use acrfence_simlab::agent::{AgentLink, HttpLink};
use acrfence_simlab::suite::simulation_policies;
use acrfence_simlab::{Bank, HttpHost, MockServer};
use acrfence_core::fence::Router;
use common::*;
use serde_json::{json, Value};

fn bank_host() -> (Arc<MockServer>, HttpHost) {
    let bank = MockServer::new(Bank::new(0));
    let host = HttpHost::start(bank.clone(), "127.0.0.1:0").unwrap();
    (bank, host)
}

#[test]
fn unknown_subcommand_is_rejected() {
    let out = acrfence(&["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn serve_without_config_is_a_usage_error() {
    let out = acrfence(&["serve"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn serve_with_missing_journal_directory_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let (_bank, host) = bank_host();
    let config = write_config(dir.path(), "nowhere/journal.log", &[("bank", host.url())], "127.0.0.1:0");
    let out = acrfence(&["serve", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(&dir.path().join("nowhere").display().to_string()), "{}", stderr(&out));
}

#[test]
fn serve_with_malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("acrfence.toml");
    std::fs::write(&path, "journal = [").unwrap();
    let out = acrfence(&["serve", "-c", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn serve_with_unreachable_upstream_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let dead = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let config = write_config(dir.path(), "journal.log", &[("bank", format!("http://{dead}/mcp"))], "127.0.0.1:0");
    let out = acrfence(&["serve", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn serve_with_taken_listen_address_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (_bank, host) = bank_host();
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let config = write_config(dir.path(), "journal.log", &[("bank", host.url())], &addr);
    let out = acrfence(&["serve", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains(&addr));
}

#[test]
fn serve_prints_banner_and_proxies_calls() {
    let dir = tempfile::tempdir().unwrap();
    let (bank, host) = bank_host();
    let config = write_config(dir.path(), "journal.log", &[("bank", host.url())], "127.0.0.1:0");
    let serve = Serve::start(&config);
    assert!(serve.banner.contains("http on http://127.0.0.1:"), "{}", serve.banner);
    assert!(serve.banner.contains(&format!("upstreams: bank ({})", host.url())), "{}", serve.banner);

    let mut link = HttpLink::new(&serve.data_url, "s1", None);
    let args = json!({"amount": 100, "recipient": "Bob", "reference_id": "r-1"});
    let reply = link.send(&Message::tool_call(1, "transfer", args)).unwrap().unwrap();
    assert_eq!(reply.result.unwrap()["structuredContent"]["status"], json!("completed"));
    assert_eq!(bank.count("transfer"), 1);
}

#[test]
fn config_path_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.toml");
    let out = std::process::Command::new(BIN)
        .arg("serve")
        .env("ACRFENCE_CONFIG", &path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.toml"), "{}", stderr(&out));
}

#[test]
fn log_of_an_empty_journal_prints_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal.log");
    drop(EffectLog::open(&path).unwrap());
    let out = acrfence(&["log", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out), "record\tsession\tbranch\tseq\ttool\toutcome\targuments\n");
}

#[test]
fn log_of_an_unreadable_journal_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = acrfence(&["log", dir.path().join("missing.log").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let garbage = dir.path().join("garbage.log");
    std::fs::write(&garbage, "not json\n{}\n").unwrap();
    let out = acrfence(&["log", garbage.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stdout(&out));
}

#[test]
fn log_cross_references_credentials() {
    let work = tempfile::tempdir().unwrap();
    let out = acrfence(&["scenario", "paper-repro", "--workdir", work.path().to_str().unwrap(), "--transport", "in-process"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let journal = work.path().join("journals/B_stateless_fence.log");

    let out = acrfence(&["log", journal.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "record\tsession\tbranch\tseq\ttool\toutcome\targuments");
    assert_eq!(lines[1..5].iter().filter(|l| l.contains("\tSucceeded\t")).count(), 4);
    assert_eq!(text.matches(" consumed by record ").count(), 2);
    assert_eq!(text.matches("reuse attempt blocked: ").count(), 2);
    assert!(!text.contains("appr."), "raw token in output");

    let out = acrfence(&["log", journal.to_str().unwrap(), "--session", "trial-01", "--json"]);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["records"].as_array().unwrap().len(), 2);
    assert_eq!(doc["blocked"].as_array().unwrap().len(), 1);
    let reused = doc["credentials"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| !c["reuse_attempts"].as_array().unwrap().is_empty())
        .count();
    assert_eq!(reused, 1);
}

#[test]
fn scenario_with_zero_trials_prints_an_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite.toml");
    std::fs::write(
        &suite,
        r#"
name = "empty"
transport = "in-process"

[[scenario]]
name = "nothing"
script = "payment"
trials = 0
"#,
    )
    .unwrap();
    let out = acrfence(&["scenario", suite.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("nothing"));
    assert!(text.ends_with("1 scenario(s), 0 failed\n"), "{text}");
}

#[test]
fn scenario_repro_preset_passes_and_writes_a_report() {
    let work = tempfile::tempdir().unwrap();
    let json = work.path().join("out.json");
    let out = acrfence(&[
        "scenario",
        "paper-repro",
        "--workdir",
        work.path().to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).ends_with("6 scenario(s), 0 failed\n"));
    assert!(!stdout(&out).contains("!!"));
    assert!(work.path().join("report.json").exists());

    let rendered = acrfence(&["report", json.to_str().unwrap(), "--strict"]);
    assert_eq!(rendered.status.code(), Some(0));
    assert_eq!(stdout(&rendered), stdout(&out));
}

#[test]
fn scenario_with_replay_disabled_flags_the_fence_row() {
    let out = acrfence(&["scenario", "paper-repro", "--disable-replay", "--transport", "in-process"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    let flagged: Vec<&str> = text.lines().filter(|l| l.starts_with("!!")).collect();
    assert_eq!(flagged.len(), 1, "{text}");
    assert!(flagged[0].contains("A/fence"));
    assert!(text.contains("duplicate_trials: expected 0, observed 10"));
}

#[test]
fn scenario_with_unknown_suite_exits_2() {
    let out = acrfence(&["scenario", "no-such-preset"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("paper-repro"));
}

#[test]
fn report_of_a_missing_file_exits_2() {
    let out = acrfence(&["report", "/nonexistent/report.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fork_errors_exit_1_and_unreachable_control_exits_3() {
    let bank = MockServer::new(Bank::new(0));
    let log = Arc::new(EffectLog::in_memory());
    let fence = Arc::new(Fence::new(log, simulation_policies(), Router::single(bank)));
    let proxy = start_http(fence.clone(), "127.0.0.1:0", "127.0.0.1:0").unwrap();
    let control = proxy.control_addr.to_string();

    let out = acrfence(&["fork", "--control", &control, "--session", "s", "--token", "t", "--branch", "b1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("NoPendingFork") || stderr(&out).contains("UnknownSession"), "{}", stderr(&out));

    let url = format!("http://{}/mcp", proxy.data_addr.unwrap());
    let mut link = HttpLink::new(&url, "s", None);
    link.send(&Message::tool_call(1, "transfer", json!({"amount": 1, "recipient": "Bob", "reference_id": "a"})))
        .unwrap();
    ControlClient::new(control.clone())
        .call(&ControlRequest::RegisterRestore {
            session_id: "s".into(),
            checkpoint_seq: 0,
        })
        .unwrap();
    let reply = link
        .send(&Message::tool_call(2, "transfer", json!({"amount": 1, "recipient": "Carol", "reference_id": "b"})))
        .unwrap()
        .unwrap();
    assert!(reply.error.unwrap().data.unwrap()["fork_token"].is_string());

    let out = acrfence(&["fork", "--control", &control, "--session", "s", "--token", "stale", "--branch", "b1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("TokenMismatch"), "{}", stderr(&out));

    let out = acrfence(&["fork", "--control", &control, "--session", "s"]);
    assert_eq!(out.status.code(), Some(0));
    let pending: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(pending["fork_token"].is_string(), "{pending}");

    proxy.shutdown();
    let out = acrfence(&["fork", "--control", &control, "--session", "s"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn fork_token_requires_branch() {
    let out = acrfence(&["fork", "--session", "s", "--token", "t"]);
    assert_eq!(out.status.code(), Some(2));
}
