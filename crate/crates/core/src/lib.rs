//! Tool-boundary interposition for checkpoint-restored LLM agents.
//!
//! The fence sits between an agent and its MCP tool servers. Every call to a
//! tool flagged irreversible is journaled before it is forwarded. After the
//! agent is restored to an earlier checkpoint, calls that land on an already
//! journaled step are compared against the journal: equivalent calls get the
//! recorded response back without touching the server, divergent ones are
//! held until an operator approves a fork, and calls carrying a credential
//! that was already consumed are refused before they leave the proxy.

pub mod classifier;
pub mod clock;
pub mod effectlog;
pub mod fence;
pub mod protocol;
pub mod transport;

pub use classifier::{
    classify, diff_arguments, FieldDiff, PolicySet, ToolPolicy, UnknownFieldTreatment, Verdict,
    VerdictKind,
};
pub use effectlog::{EffectLog, EffectRecord, Outcome};
pub use fence::{Fence, FenceOptions, FenceOutcome, OutcomeKind, SessionState};
pub use protocol::{Message, MessageKind, ToolCall};
