//! Simulated tool servers, a scripted checkpoint-restoring agent, and the
//! replay and credential-reuse scenarios run with and without the fence.

pub mod agent;
pub mod report;
pub mod resynth;
pub mod script;
pub mod server;
pub mod services;
pub mod suite;

pub use agent::{AgentLink, CallOutcome, ScriptedAgent, Transcript};
pub use report::{ScenarioReport, SuiteReport, TrialReport};
pub use resynth::{IntentMutation, ResynthesisModel, Resynthesizer};
pub use script::{ScenarioConfig, ScenarioError, SuiteConfig, Transport};
pub use server::{HttpHost, MockServer};
pub use services::{Approval, Bank, Cloud, Validation};
pub use suite::{preset, preset_names, run_scenario, run_suite, run_trial, SuiteError, SuiteOptions, TrialRun};
