//! History log records.
//!
//! A run emits one line-delimited JSON record per observable event: client
//! operation invocations and responses, message sends and receives, crashes
//! and protocol faults. The field set is stable and the encoding is
//! deterministic, so a log replays and re-checks bit-exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{BlockId, Tag};

/// Event discriminator.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Invoke,
    Respond,
    Send,
    Recv,
    Crash,
    /// Local protocol-violation detection at a node (aborts the run).
    Fault,
}

/// Structured, operation-specific extras carried by some records.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Detail {
    /// Uuid of the enclosing client operation, for nested operations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parent: Option<u64>,
    /// Maximum tag discovered during the query phase of a coverable write.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discovered: Option<Tag>,
    /// Writer's version state at invocation of a coverable write.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub version: Option<Tag>,
    /// Configuration sequence snapshot: (config id, "P"/"F") per slot.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cseq: Option<Vec<(u64, String)>>,
    /// Block chain returned by a file read, in list order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain: Option<Vec<ChainLink>>,
    /// Per-block outcomes of a file update, in issue order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<Vec<BlockOutcome>>,
    /// Wire verb of a send/recv record.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verb: Option<String>,
    /// Free-form fault description.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub info: Option<String>,
    /// Erasure decodes performed by the operation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decodes: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChainLink {
    pub block: BlockId,
    pub ptr: Option<BlockId>,
    pub tag: Tag,
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BlockOutcome {
    pub block: BlockId,
    pub flag: String,
    pub tag: Tag,
}

/// One log line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// Virtual time, nanoseconds.
    pub vtime: u64,
    pub node: String,
    pub event: EventKind,
    /// Operation kind for invoke/respond, wire verb for send/recv.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub op: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<Tag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
    /// Operation uuid; correlates invoke/respond pairs and their messages.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uuid: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Detail>,
}

impl HistoryRecord {
    pub fn new(vtime: u64, node: impl Into<String>, event: EventKind) -> Self {
        HistoryRecord {
            vtime,
            node: node.into(),
            event,
            op: None,
            block: None,
            config: None,
            tag: None,
            flag: None,
            bytes: None,
            uuid: None,
            detail: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {err}")]
    Parse { line: usize, err: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An ordered run history.
#[derive(Clone, Debug, Default)]
pub struct HistoryLog {
    pub records: Vec<HistoryRecord>,
}

impl HistoryLog {
    pub fn push(&mut self, rec: HistoryRecord) {
        self.records.push(rec);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<HistoryLog, LogError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(line)
                .map_err(|err| LogError::Parse { line: i + 1, err })?;
            records.push(rec);
        }
        Ok(HistoryLog { records })
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<(), LogError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<HistoryLog, LogError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text)
    }
}

/// Operation kind names used in `op` fields.
pub mod ops {
    pub const CVR_WRITE: &str = "cvr-write";
    pub const CVR_READ: &str = "cvr-read";
    pub const FM_UPDATE: &str = "fm-update";
    pub const FM_READ: &str = "fm-read";
    pub const FM_RECONFIG: &str = "fm-reconfig";
    pub const RECON: &str = "recon";
    pub const READ_CONFIG: &str = "read-config";
    pub const GET_TAG: &str = "get-tag";
    pub const GET_DATA: &str = "get-data";
    pub const PUT_DATA: &str = "put-data";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip_is_stable() {
        let mut log = HistoryLog::default();
        let mut rec = HistoryRecord::new(5, "w1", EventKind::Invoke);
        rec.op = Some(ops::CVR_WRITE.into());
        rec.block = Some(BlockId::genesis(1));
        rec.uuid = Some(42);
        log.push(rec);
        let mut rec = HistoryRecord::new(9, "w1", EventKind::Respond);
        rec.op = Some(ops::CVR_WRITE.into());
        rec.tag = Some(Tag::ZERO);
        rec.flag = Some("chg".into());
        rec.detail = Some(Detail {
            discovered: Some(Tag::ZERO),
            ..Detail::default()
        });
        log.push(rec);

        let text = log.to_jsonl();
        let parsed = HistoryLog::from_jsonl(&text).unwrap();
        assert_eq!(parsed.to_jsonl(), text);
        assert_eq!(parsed.records.len(), 2);
    }

    #[test]
    fn parse_error_carries_line_number() {
        let text = "{\"vtime\":1,\"node\":\"a\",\"event\":\"invoke\"}\nnot-json\n";
        match HistoryLog::from_jsonl(text) {
            Err(LogError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
