//! Runs scenario suites: fresh servers per trial, an optional fence in
//! front of them, the scripted agent, and server-side accounting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use acrfence_core::classifier::PolicySet;
use acrfence_core::clock::LogicalClock;
use acrfence_core::effectlog::{EffectLog, LogError};
use acrfence_core::fence::control::ControlClient;
use acrfence_core::fence::proxy::{start_http, ProxyError, ProxyHandle};
use acrfence_core::fence::{Fence, FenceOptions, HttpUpstream, Router, Upstream, UpstreamError};
use thiserror::Error;

use crate::agent::{DirectLink, FenceLink, HttpLink, ScriptedAgent, Transcript};
use crate::report::{trial_report, GroundTruth, ScenarioReport, SuiteReport, TrialReport};
use crate::resynth::{ResynthesisModel, Resynthesizer};
use crate::script::{ScenarioConfig, ScenarioError, SuiteConfig, Transport};
use crate::server::{HttpHost, MockServer};
use crate::services::{Approval, ApprovalState, Bank, BankState, Cloud, CloudState};

/// Tool policies for the simulated services.
pub const SIMULATION_POLICIES: &str = include_str!("../presets/policies.toml");

const PRESETS: &[(&str, &str)] = &[
    ("paper-repro", include_str!("../presets/paper-repro.toml")),
    ("full", include_str!("../presets/full.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(name, _)| *name)
}

/// A built-in suite by name.
pub fn preset(name: &str) -> Option<Result<SuiteConfig, ScenarioError>> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| SuiteConfig::from_toml_str(text))
}

pub fn simulation_policies() -> PolicySet {
    PolicySet::from_toml_str(SIMULATION_POLICIES).expect("built-in policies parse")
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("work directory {path}: {source}")]
    Workdir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("journal: {0}")]
    Journal(#[from] LogError),
    #[error("mock server: {0}")]
    Server(std::io::Error),
    #[error("upstream: {0}")]
    Upstream(#[from] UpstreamError),
    #[error("fence: {0}")]
    Proxy(#[from] ProxyError),
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Journals go to `<workdir>/journals/`.
    pub workdir: PathBuf,
    /// Runs every fenced scenario with replay switched off.
    pub disable_replay: bool,
    /// Overrides the suite's transport.
    pub transport: Option<Transport>,
}

impl SuiteOptions {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        Self {
            workdir: workdir.into(),
            disable_replay: false,
            transport: None,
        }
    }
}

pub fn run_suite(config: &SuiteConfig, opts: &SuiteOptions) -> Result<SuiteReport, SuiteError> {
    config.validate()?;
    let transport = opts.transport.unwrap_or(config.transport);
    let mut reports = Vec::with_capacity(config.scenarios.len());
    for scenario in &config.scenarios {
        reports.push(run_scenario(scenario, transport, opts)?.0);
    }
    let transport_name = match transport {
        Transport::InProcess => "in-process",
        Transport::Http => "http",
    };
    Ok(SuiteReport::new(&config.name, transport_name, reports))
}

/// Journal file for a scenario: its name with anything unusual replaced.
pub fn journal_path(workdir: &Path, scenario: &str) -> PathBuf {
    let slug: String = scenario
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    workdir.join("journals").join(format!("{slug}.log"))
}

/// Runs every trial of one scenario. Transcripts are returned alongside
/// the report.
pub fn run_scenario(
    sc: &ScenarioConfig,
    transport: Transport,
    opts: &SuiteOptions,
) -> Result<(ScenarioReport, Vec<Transcript>), SuiteError> {
    let log = if sc.fence {
        let path = journal_path(&opts.workdir, &sc.name);
        let dir = path.parent().expect("journal path has a parent");
        std::fs::create_dir_all(dir).map_err(|source| SuiteError::Workdir {
            path: dir.to_owned(),
            source,
        })?;
        match std::fs::remove_file(&path) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(source) => return Err(SuiteError::Workdir { path, source }),
        }
        Some(Arc::new(EffectLog::open_with(&path, false, Arc::new(LogicalClock::default()))?))
    } else {
        None
    };
    let mut per_trial = Vec::new();
    let mut transcripts = Vec::new();
    for trial in 0..sc.trials {
        let run = run_trial(sc, trial, transport, log.clone(), opts)?;
        per_trial.push(run.report);
        transcripts.push(run.transcript);
    }
    let report = ScenarioReport::new(&sc.name, &sc.description, sc.fence, per_trial, &sc.expect);
    Ok((report, transcripts))
}

/// Fresh services for one trial.
pub struct Services {
    pub bank: Arc<MockServer>,
    pub approval: Arc<MockServer>,
    pub cloud: Arc<MockServer>,
}

impl Services {
    pub fn for_trial(sc: &ScenarioConfig, trial: u64) -> Self {
        Self {
            bank: MockServer::new(Bank::new(sc.crash_cycles)),
            approval: MockServer::new(Approval::with_issuer(
                sc.validation,
                format!("{}#{trial}", sc.name),
            )),
            cloud: MockServer::new(Cloud::default()),
        }
    }

    pub fn all(&self) -> [&Arc<MockServer>; 3] {
        [&self.bank, &self.approval, &self.cloud]
    }

    pub fn bank_state(&self) -> BankState {
        serde_json::from_value(self.bank.snapshot()).expect("bank snapshot")
    }

    pub fn approval_state(&self) -> ApprovalState {
        serde_json::from_value(self.approval.snapshot()).expect("approval snapshot")
    }

    pub fn cloud_state(&self) -> CloudState {
        serde_json::from_value(self.cloud.snapshot()).expect("cloud snapshot")
    }

    pub fn requests(&self) -> BTreeMap<String, BTreeMap<String, u64>> {
        self.all()
            .iter()
            .map(|s| (s.name().to_owned(), s.counters()))
            .collect()
    }
}

pub fn trial_seed(sc: &ScenarioConfig, trial: u64) -> u64 {
    sc.seed.wrapping_add(trial) ^ sc.resynthesis.seed
}

pub fn session_name(trial: u64) -> String {
    format!("trial-{trial:02}")
}

pub struct TrialRun {
    pub report: TrialReport,
    pub transcript: Transcript,
    /// The trial's servers, stopped, with their final state.
    pub services: Services,
}

/// Runs one trial with its own servers; `log` is the scenario journal when
/// the fence is on.
pub fn run_trial(
    sc: &ScenarioConfig,
    trial: u64,
    transport: Transport,
    log: Option<Arc<EffectLog>>,
    opts: &SuiteOptions,
) -> Result<TrialRun, SuiteError> {
    let services = Services::for_trial(sc, trial);
    let seed = trial_seed(sc, trial);
    let resynth = Resynthesizer::new(ResynthesisModel {
        seed,
        ..sc.resynthesis.clone()
    });
    let agent = ScriptedAgent::new(sc, trial, resynth);
    let session = session_name(trial);
    let fence_options = FenceOptions {
        replay_disabled: opts.disable_replay,
        ..FenceOptions::default()
    };

    let transcript = match transport {
        Transport::InProcess => {
            let upstreams: Vec<Arc<dyn Upstream>> =
                services.all().iter().map(|s| Arc::clone(*s) as Arc<dyn Upstream>).collect();
            let router = Router::discover(upstreams)?;
            match &log {
                Some(log) => {
                    let fence = Arc::new(
                        Fence::new(log.clone(), simulation_policies(), router).with_options(fence_options),
                    );
                    agent.run(&mut FenceLink::new(fence, session))
                }
                None => agent.run(&mut DirectLink::new(router)),
            }
        }
        Transport::Http => {
            let hosts = services
                .all()
                .iter()
                .map(|s| HttpHost::start(Arc::clone(*s), "127.0.0.1:0"))
                .collect::<Result<Vec<_>, _>>()
                .map_err(SuiteError::Server)?;
            let upstreams: Vec<Arc<dyn Upstream>> = services
                .all()
                .iter()
                .zip(&hosts)
                .map(|(s, h)| {
                    Arc::new(HttpUpstream::new(s.name(), h.url(), Duration::from_secs(10))) as Arc<dyn Upstream>
                })
                .collect();
            let router = Router::discover(upstreams)?;
            let transcript = match &log {
                Some(log) => {
                    let fence = Arc::new(
                        Fence::new(log.clone(), simulation_policies(), router).with_options(fence_options),
                    );
                    let proxy = start_http(fence, "127.0.0.1:0", "127.0.0.1:0")?;
                    let transcript = run_over_http(agent, &proxy, &session);
                    proxy.shutdown();
                    transcript
                }
                None => agent.run(&mut DirectLink::new(router)),
            };
            drop(hosts);
            transcript
        }
    };

    let bank = services.bank_state();
    let approval = services.approval_state();
    let cloud = services.cloud_state();
    let truth = GroundTruth {
        bank: &bank,
        approval: &approval,
        cloud: &cloud,
        requests: services.requests(),
    };
    let report = trial_report(trial, seed, &truth, &transcript, log.as_deref());
    Ok(TrialRun {
        report,
        transcript,
        services,
    })
}

fn run_over_http(agent: ScriptedAgent<'_>, proxy: &ProxyHandle, session: &str) -> Transcript {
    let data = proxy.data_addr.expect("http proxy has a data address");
    let control = ControlClient::new(proxy.control_addr.to_string());
    let mut link = HttpLink::new(format!("http://{data}/mcp"), session, Some(control));
    agent.run(&mut link)
}
