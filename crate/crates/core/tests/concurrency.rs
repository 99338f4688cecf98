use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use acrfence_core::classifier::{PolicySet, ToolPolicy};
use acrfence_core::fence::{Router, Upstream, UpstreamError};
use acrfence_core::{EffectLog, Fence, Message};
use serde_json::json;

struct Counter {
    calls: AtomicU64,
}

impl Upstream for Counter {
    fn name(&self) -> &str {
        "counter"
    }

    fn exchange(&self, msg: &Message) -> Result<Option<Message>, UpstreamError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(msg
            .id
            .clone()
            .map(|id| Message::response(id, json!({"structuredContent": {"n": n}}))))
    }
}

fn setup() -> (Arc<Fence>, Arc<Counter>) {
    let upstream = Arc::new(Counter { calls: AtomicU64::new(0) });
    let policies = PolicySet::new().with(ToolPolicy::irreversible("transfer").intent(["amount", "recipient"]).volatile(["ref"]));
    let fence = Fence::new(Arc::new(EffectLog::in_memory()), policies, Router::single(upstream.clone()));
    (Arc::new(fence), upstream)
}

#[test]
fn sessions_run_in_parallel_without_interference() {
    let (fence, upstream) = setup();
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let fence = fence.clone();
            thread::spawn(move || {
                let session = format!("s{t}");
                for i in 0..50 {
                    let msg = Message::tool_call(i + 1, "transfer", json!({"amount": i, "recipient": "Bob", "ref": format!("{t}-{i}")}));
                    assert!(fence.handle_message(&session, msg).unwrap().result.is_some());
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(upstream.calls.load(Ordering::SeqCst), 400);
    for t in 0..8 {
        let seqs: Vec<u64> = fence.log().session_records(&format!("s{t}")).iter().map(|r| r.seq_index).collect();
        assert_eq!(seqs.iter().copied().collect::<BTreeSet<_>>(), (0..50).collect());
    }
}

#[test]
fn one_session_serializes_concurrent_calls() {
    let (fence, _) = setup();
    fence.open_session("shared");
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let fence = fence.clone();
            thread::spawn(move || {
                for i in 0..25 {
                    let msg = Message::tool_call(format!("{t}-{i}"), "transfer", json!({"amount": t * 100 + i, "recipient": "Bob"}));
                    fence.handle_message("shared", msg).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let seqs: Vec<u64> = fence.log().session_records("shared").iter().map(|r| r.seq_index).collect();
    assert_eq!(seqs.len(), 200);
    assert_eq!(seqs.iter().copied().collect::<BTreeSet<_>>(), (0..200).collect());
}

/// Threads racing to retry the same call after each restore. The first
/// round journals three new positions; from then on every position is
/// already journaled with the same intent, so every call is replayed.
#[test]
fn concurrent_retries_are_all_replayed() {
    let (fence, upstream) = setup();
    fence.open_session("s");
    fence
        .handle_message("s", Message::tool_call(1, "transfer", json!({"amount": 5, "recipient": "Bob", "ref": "a"})))
        .unwrap();
    let before = upstream.calls.load(Ordering::SeqCst);
    for round in 0..20 {
        fence.register_restore("s", 0).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let fence = fence.clone();
                thread::spawn(move || {
                    fence
                        .handle_message("s", Message::tool_call(format!("{round}-{t}"), "transfer", json!({"amount": 5, "recipient": "Bob", "ref": format!("r{round}{t}")})))
                        .unwrap()
                })
            })
            .collect();
        let replies: Vec<Message> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let replayed = replies.iter().filter(|m| m.extra.contains_key("acrfence")).count();
        assert_eq!(replayed, if round == 0 { 1 } else { 4 }, "{replies:?}");
    }
    assert_eq!(upstream.calls.load(Ordering::SeqCst), before + 3);
    assert_eq!(fence.log().session_records("s").len(), 4);
}
