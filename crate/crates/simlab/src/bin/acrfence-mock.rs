//! Runs one simulated tool server over HTTP or stdio.

use std::io::{stdin, stdout};
use std::process::ExitCode;

use acrfence_simlab::server::{serve_stdio, HttpHost, MockServer};
use acrfence_simlab::services::{Approval, Bank, Cloud, Validation};
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, ValueEnum)]
enum Service {
    Bank,
    Approval,
    Cloud,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Stateless,
    Stateful,
}

#[derive(Parser)]
#[command(name = "acrfence-mock", version, about = "Simulated MCP tool server")]
struct Args {
    #[arg(long, value_enum)]
    service: Service,
    /// Listen on this address instead of speaking over stdin/stdout.
    #[arg(long, value_name = "ADDR")]
    http: Option<String>,
    /// Malformed confirm_receipt replies before the bank behaves.
    #[arg(long, default_value_t = 0)]
    crash_budget: u32,
    #[arg(long, value_enum, default_value = "stateless")]
    validation: Mode,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let server = match args.service {
        Service::Bank => MockServer::new(Bank::new(args.crash_budget)),
        Service::Approval => MockServer::new(Approval::new(match args.validation {
            Mode::Stateless => Validation::Stateless,
            Mode::Stateful => Validation::Stateful,
        })),
        Service::Cloud => MockServer::new(Cloud::default()),
    };
    let result = match args.http {
        Some(addr) => HttpHost::start(server, &addr).map(|host| {
            println!("{} listening on {}", host.url(), host.addr);
            host.wait();
        }),
        None => serve_stdio(&server, stdin().lock(), stdout().lock()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("acrfence-mock: {e}");
            ExitCode::FAILURE
        }
    }
}
