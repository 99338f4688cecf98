#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use acrfence_simlab::suite::SIMULATION_POLICIES;

pub const BIN: &str = env!("CARGO_BIN_EXE_acrfence");

pub fn acrfence(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ACRFENCE_CONFIG")
        .env_remove("ACRFENCE_CONTROL")
        .output()
        .expect("spawn acrfence")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes the simulation policies and a proxy config into `dir`; returns the
/// config path. `upstreams` are (name, url) pairs.
pub fn write_config(dir: &Path, journal: &str, upstreams: &[(&str, String)], listen: &str) -> PathBuf {
    std::fs::write(dir.join("policies.toml"), SIMULATION_POLICIES).unwrap();
    let mut text = format!(
        "journal = \"{journal}\"\npolicies = \"policies.toml\"\n\n[listen]\ntransport = \"http\"\naddr = \"{listen}\"\n\n[control]\naddr = \"127.0.0.1:0\"\n"
    );
    for (name, url) in upstreams {
        text.push_str(&format!("\n[[upstream]]\nname = \"{name}\"\nurl = \"{url}\"\n"));
    }
    let path = dir.join("acrfence.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// A running `acrfence serve`; killed on drop.
pub struct Serve {
    pub child: Child,
    pub banner: String,
    pub data_url: String,
    pub control: String,
}

impl Serve {
    pub fn start(config: &Path) -> Self {
        let mut child = Command::new(BIN)
            .args(["serve", "--config"])
            .arg(config)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .expect("spawn serve");
        let stderr = child.stderr.take().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                if line.starts_with("acrfence listening:") {
                    let _ = tx.send(line);
                }
            }
        });
        let banner = match rx.recv_timeout(Duration::from_secs(20)) {
            Ok(line) => line,
            Err(_) => {
                let _ = child.kill();
                panic!("serve printed no banner; exit {:?}", child.wait());
            }
        };
        let data_url = between(&banner, "http on ", ";").to_owned();
        let control = between(&banner, "control on ", ";").to_owned();
        Self {
            child,
            banner,
            data_url,
            control,
        }
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Serve {
    fn drop(&mut self) {
        self.kill();
    }
}

fn between<'a>(s: &'a str, start: &str, end: &str) -> &'a str {
    let from = s.find(start).expect("banner field") + start.len();
    let rest = &s[from..];
    &rest[..rest.find(end).unwrap_or(rest.len())]
}
