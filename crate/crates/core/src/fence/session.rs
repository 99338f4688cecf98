use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::Verdict;
use crate::protocol::ToolCall;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchLink {
    pub branch_id: String,
    pub parent_branch_id: Option<String>,
    /// First tool-call position that belongs to this branch rather than its
    /// parent. Zero for the root branch.
    pub forked_from_seq: u64,
}

/// A call held back until an operator approves a fork.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingFork {
    pub token: String,
    pub blocked_call: ToolCall,
    pub verdict: Verdict,
    /// Error payload handed to the agent, repeated while the fork is pending.
    pub payload: Value,
}

/// Per-session restore and lineage bookkeeping, owned exclusively by the
/// session's handler.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub session_id: String,
    pub current_branch_id: String,
    /// Root first, current branch last.
    pub branch_lineage: Vec<BranchLink>,
    pub next_seq_index: u64,
    /// Highest journaled position of the restored-from lineage, while a
    /// restore is active and not yet passed.
    pub restore_frontier: Option<u64>,
    pub pending_fork: Option<PendingFork>,
    /// `(numeric wire id, seq_index)` of calls that went through, used to
    /// notice an agent silently rewinding.
    pub(crate) wire_history: Vec<(i64, u64)>,
}

impl SessionState {
    pub fn new(session_id: impl Into<String>, branch_id: impl Into<String>) -> Self {
        let branch_id = branch_id.into();
        Self {
            session_id: session_id.into(),
            current_branch_id: branch_id.clone(),
            branch_lineage: vec![BranchLink {
                branch_id,
                parent_branch_id: None,
                forked_from_seq: 0,
            }],
            next_seq_index: 0,
            restore_frontier: None,
            pending_fork: None,
            wire_history: Vec::new(),
        }
    }

    pub(crate) fn take_seq(&mut self) -> u64 {
        let seq = self.next_seq_index;
        self.next_seq_index += 1;
        seq
    }

    /// Branches whose history covers `seq_index`, most derived first. A
    /// parent only covers positions before its child forked off.
    pub fn ancestry_for(&self, seq_index: u64) -> Vec<String> {
        let mut out = Vec::new();
        for (i, link) in self.branch_lineage.iter().enumerate().rev() {
            out.push(link.branch_id.clone());
            if i == 0 || seq_index >= link.forked_from_seq {
                break;
            }
        }
        out
    }

    pub fn parent_branch_id(&self) -> Option<&str> {
        self.branch_lineage
            .last()
            .and_then(|l| l.parent_branch_id.as_deref())
    }

    pub fn has_branch(&self, branch_id: &str) -> bool {
        self.branch_lineage.iter().any(|l| l.branch_id == branch_id)
    }

    pub fn on_restore_path(&self, seq_index: u64) -> bool {
        self.restore_frontier.is_some_and(|f| seq_index <= f)
    }

    pub(crate) fn note_progress(&mut self, wire_id: &Value, seq_index: u64) {
        if let Some(id) = wire_id.as_i64() {
            self.wire_history.push((id, seq_index));
        }
        if self
            .restore_frontier
            .is_some_and(|f| self.next_seq_index > f)
        {
            self.restore_frontier = None;
        }
    }

    /// Position the agent appears to have rewound to, if `wire_id` is not
    /// above every id seen so far.
    pub(crate) fn regressed_to(&self, wire_id: &Value) -> Option<u64> {
        let id = wire_id.as_i64()?;
        let (last, _) = self.wire_history.last()?;
        if id > *last {
            return None;
        }
        self.wire_history
            .iter()
            .find(|(w, _)| *w >= id)
            .map(|(_, seq)| *seq)
    }

    pub(crate) fn rewind_to(&mut self, checkpoint_seq: u64, frontier: Option<u64>) {
        self.next_seq_index = checkpoint_seq;
        self.restore_frontier = frontier.filter(|f| *f >= checkpoint_seq);
        self.pending_fork = None;
        self.wire_history.retain(|(_, seq)| *seq < checkpoint_seq);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn forked(mut s: SessionState, branch: &str, at: u64) -> SessionState {
        let parent = s.current_branch_id.clone();
        s.branch_lineage.push(BranchLink {
            branch_id: branch.into(),
            parent_branch_id: Some(parent),
            forked_from_seq: at,
        });
        s.current_branch_id = branch.into();
        s
    }

    #[test]
    fn ancestry_respects_fork_points() {
        let s = forked(forked(SessionState::new("s1", "b0"), "b1", 3), "b2", 1);
        assert_eq!(s.ancestry_for(5), vec!["b2"]);
        assert_eq!(s.ancestry_for(1), vec!["b2"]);
        assert_eq!(s.ancestry_for(0), vec!["b2", "b1", "b0"]);
        let s = forked(SessionState::new("s1", "b0"), "b1", 3);
        assert_eq!(s.ancestry_for(2), vec!["b1", "b0"]);
        assert_eq!(s.ancestry_for(3), vec!["b1"]);
        assert_eq!(s.parent_branch_id(), Some("b0"));
    }

    #[test]
    fn wire_regression() {
        let mut s = SessionState::new("s1", "b0");
        s.next_seq_index = 3;
        s.note_progress(&json!(2), 0);
        s.note_progress(&json!(5), 1);
        s.note_progress(&json!(7), 2);
        assert_eq!(s.regressed_to(&json!(8)), None);
        assert_eq!(s.regressed_to(&json!(5)), Some(1));
        assert_eq!(s.regressed_to(&json!(3)), Some(1));
        assert_eq!(s.regressed_to(&json!(1)), Some(0));
        assert_eq!(s.regressed_to(&json!("abc")), None);
    }

    #[test]
    fn frontier_clears_once_passed() {
        let mut s = SessionState::new("s1", "b0");
        s.next_seq_index = 5;
        s.rewind_to(2, Some(3));
        assert!(s.on_restore_path(3));
        s.next_seq_index = 4;
        s.note_progress(&json!(1), 3);
        assert_eq!(s.restore_frontier, None);
        s.rewind_to(2, Some(1));
        assert_eq!(s.restore_frontier, None);
    }
}
