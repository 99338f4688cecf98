//! Text and JSON renderings of a journal: the records, then the
//! credential cross-reference (digest, consuming record, later attempts)
//! and any other blocked calls.

use std::fmt::Write as _;

use acrfence_core::effectlog::{BlockedEntry, JournalView, RecordFilter};
use acrfence_core::protocol::canonical_string;
use acrfence_core::{EffectRecord, Outcome};
use serde_json::{json, Value};

pub const HEADER: &str = "record\tsession\tbranch\tseq\ttool\toutcome\targuments";

fn outcome(o: Outcome) -> &'static str {
    match o {
        Outcome::Succeeded => "Succeeded",
        Outcome::Failed => "Failed",
        Outcome::Unknown => "Unknown",
    }
}

fn blocked_matches(filter: &RecordFilter, b: &BlockedEntry) -> bool {
    filter.session_id.as_ref().is_none_or(|s| *s == b.session_id)
        && filter.branch_id.as_ref().is_none_or(|x| *x == b.branch_id)
        && filter.tool_name.as_ref().is_none_or(|t| *t == b.tool_name)
}

fn record_line(r: &EffectRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.record_id,
        r.session_id,
        r.branch_id,
        r.seq_index,
        r.tool_name,
        outcome(r.outcome),
        canonical_string(&r.arguments)
    )
}

fn attempt_line(b: &BlockedEntry) -> String {
    format!(
        "{}/{}@{} {} {} {}",
        b.session_id,
        b.branch_id,
        b.seq_index,
        b.tool_name,
        b.outcome,
        canonical_string(&b.arguments)
    )
}

pub fn to_text(view: &JournalView, filter: &RecordFilter) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for r in view.records.iter().filter(|r| filter.matches(r)) {
        out.push_str(&record_line(r));
        out.push('\n');
    }

    let blocked: Vec<&BlockedEntry> = view.blocked.iter().filter(|b| blocked_matches(filter, b)).collect();
    let mut credentials = String::new();
    for c in &view.consumed {
        let Some(consumer) = view.records.iter().find(|r| r.record_id == c.consumed_by) else {
            continue;
        };
        let attempts: Vec<&&BlockedEntry> = blocked.iter().filter(|b| b.reused_digests.contains(&c.digest)).collect();
        if !filter.matches(consumer) && attempts.is_empty() {
            continue;
        }
        let _ = writeln!(
            credentials,
            "{} ({}) consumed by record {}: {}/{}@{} {} {}",
            c.digest,
            c.source_field,
            consumer.record_id,
            consumer.session_id,
            consumer.branch_id,
            consumer.seq_index,
            consumer.tool_name,
            canonical_string(&consumer.arguments)
        );
        if attempts.is_empty() {
            credentials.push_str("  no reuse attempts\n");
        }
        for b in attempts {
            let _ = writeln!(credentials, "  reuse attempt blocked: {}", attempt_line(b));
        }
    }
    if !credentials.is_empty() {
        out.push_str("\ncredentials:\n");
        out.push_str(&credentials);
    }

    let forks: Vec<&&BlockedEntry> = blocked.iter().filter(|b| b.reused_digests.is_empty()).collect();
    if !forks.is_empty() {
        out.push_str("\nblocked:\n");
        for b in forks {
            let _ = writeln!(out, "  {} ({})", attempt_line(b), b.reason);
        }
    }
    out
}

pub fn to_json(view: &JournalView, filter: &RecordFilter) -> Value {
    let records: Vec<&EffectRecord> = view.records.iter().filter(|r| filter.matches(r)).collect();
    let blocked: Vec<&BlockedEntry> = view.blocked.iter().filter(|b| blocked_matches(filter, b)).collect();
    let credentials: Vec<Value> = view
        .consumed
        .iter()
        .map(|c| {
            let attempts: Vec<&&BlockedEntry> = blocked.iter().filter(|b| b.reused_digests.contains(&c.digest)).collect();
            json!({
                "digest": c.digest,
                "source_field": c.source_field,
                "consumed_by": c.consumed_by,
                "consumed_at": c.consumed_at,
                "reuse_attempts": attempts,
            })
        })
        .collect();
    json!({
        "records": records,
        "credentials": credentials,
        "blocked": blocked,
        "forks": view.forks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_journal_is_just_the_header() {
        let view = JournalView {
            records: vec![],
            consumed: vec![],
            forks: vec![],
            blocked: vec![],
        };
        assert_eq!(to_text(&view, &RecordFilter::default()), format!("{HEADER}\n"));
    }
}
