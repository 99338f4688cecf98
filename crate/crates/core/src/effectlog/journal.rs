//! On-disk journal format and sinks.
//!
//! One canonical JSON document per line. Each line is an entry tagged by
//! `entry`: `pending` carries a full record with outcome `Unknown`,
//! `finalize` carries the response and final outcome for a record,
//! `consume` adds a credential digest, `fork` records a branch fork,
//! `blocked` is an audit line for a call the fence refused.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CredentialDigest, LogError, Outcome};
use crate::protocol::{canonical_bytes, parse_strict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingEntry {
    pub record_id: u64,
    pub session_id: String,
    pub branch_id: String,
    pub parent_branch_id: Option<String>,
    pub seq_index: u64,
    pub tool_name: String,
    pub arguments: Value,
    pub env_context: BTreeMap<String, String>,
    pub irreversible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeEntry {
    pub record_id: u64,
    pub response: Value,
    pub outcome: Outcome,
    pub finalized_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForkEntry {
    pub session_id: String,
    pub branch_id: String,
    pub parent_branch_id: String,
    pub forked_from_seq: u64,
    pub forked_at: u64,
}

/// A refused call. Not a record: it holds no position and is never replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockedEntry {
    pub session_id: String,
    pub branch_id: String,
    pub seq_index: u64,
    pub tool_name: String,
    /// Credentials appear as digests; `null` when no policy covered the tool.
    pub arguments: Value,
    /// `BlockedForkRequired` or `BlockedCredentialReuse`.
    pub outcome: String,
    pub reason: String,
    /// Digests of the already consumed credentials the call presented.
    #[serde(default)]
    pub reused_digests: Vec<String>,
    pub prior_record: Option<u64>,
    pub blocked_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum JournalEntry {
    Pending(PendingEntry),
    Finalize(FinalizeEntry),
    Consume(CredentialDigest),
    Fork(ForkEntry),
    Blocked(BlockedEntry),
}

impl JournalEntry {
    pub fn to_line(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("journal entries serialize");
        let mut line = canonical_bytes(&value);
        line.push(b'\n');
        line
    }

    pub fn from_line(line: &[u8]) -> Result<Self, String> {
        let value = parse_strict(line).map_err(|e| e.to_string())?;
        serde_json::from_value(value).map_err(|e| e.to_string())
    }
}

/// Destination for journal lines. An append either lands completely or
/// reports an error.
pub trait JournalSink: Send {
    fn append(&mut self, line: &[u8]) -> io::Result<()>;
}

pub struct FileSink {
    file: File,
    sync: bool,
}

impl JournalSink for FileSink {
    fn append(&mut self, line: &[u8]) -> io::Result<()> {
        self.file.write_all(line)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct MemorySink;

impl JournalSink for MemorySink {
    fn append(&mut self, _line: &[u8]) -> io::Result<()> {
        Ok(())
    }
}

/// Reads every entry of a journal file.
///
/// A final line without its newline that fails to parse is a torn write
/// from a crash and is dropped; its byte offset is returned so a writer can
/// truncate it. Any other unparsable line is corruption.
pub fn read_entries(path: &Path) -> Result<(Vec<JournalEntry>, u64), LogError> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => f.read_to_end(&mut bytes).map_err(|e| LogError::io(path, e))?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(LogError::io(path, e)),
    };
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        let (line, next, complete) = match rest.iter().position(|b| *b == b'\n') {
            Some(pos) => (&rest[..pos], offset + pos + 1, true),
            None => (rest, bytes.len(), false),
        };
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            continue;
        }
        match JournalEntry::from_line(line) {
            Ok(entry) => entries.push(entry),
            Err(_) if !complete => {
                tracing::warn!(path = %path.display(), line = line_no, "dropping torn journal tail");
                return Ok((entries, offset as u64));
            }
            Err(reason) => {
                return Err(LogError::Corrupt {
                    path: path.display().to_string(),
                    line: line_no,
                    reason,
                })
            }
        }
        offset = next;
    }
    Ok((entries, bytes.len() as u64))
}

/// Opens a journal for appending, truncating any torn tail.
pub fn open_file_sink(path: &Path, valid_len: u64, sync: bool) -> Result<FileSink, LogError> {
    let mut file = OpenOptions::new()
        .create(true)
        .read(true)
        .write(true)
        .truncate(false)
        .open(path)
        .map_err(|e| LogError::io(path, e))?;
    let len = file.metadata().map_err(|e| LogError::io(path, e))?.len();
    if len > valid_len {
        file.set_len(valid_len).map_err(|e| LogError::io(path, e))?;
    }
    let mut unterminated = false;
    if valid_len > 0 {
        let mut last = [0u8; 1];
        file.seek(SeekFrom::Start(valid_len - 1))
            .and_then(|_| file.read_exact(&mut last))
            .map_err(|e| LogError::io(path, e))?;
        unterminated = last[0] != b'\n';
    }
    drop(file);
    let file = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| LogError::io(path, e))?;
    let mut sink = FileSink { file, sync };
    if unterminated {
        sink.append(b"\n").map_err(|e| LogError::io(path, e))?;
    }
    Ok(sink)
}
