//! Shared domain vocabulary: tags, configurations, block identities and
//! operation outcomes used across every layer of the stack.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Writer / client tokens
// ---------------------------------------------------------------------------

/// Fixed-width opaque token identifying a writer or client.
///
/// Tokens compare lexicographically on their raw bytes. The all-zero token is
/// the distinguished bottom element used by the initial tag and by genesis
/// block ids, so any real participant token must be non-zero.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WriterId(pub [u8; 16]);

impl WriterId {
    pub const LEN: usize = 16;

    /// The bottom token, minimum of the order.
    pub const BOTTOM: WriterId = WriterId([0u8; 16]);

    /// Builds a token from a small numeric id. The id is stored big-endian in
    /// the trailing bytes and offset by one so the result is never bottom.
    pub fn from_index(id: u64) -> Self {
        let mut b = [0u8; 16];
        b[8..16].copy_from_slice(&(id + 1).to_be_bytes());
        WriterId(b)
    }

    pub fn is_bottom(&self) -> bool {
        self.0 == [0u8; 16]
    }

    /// Compact hex form with leading zeros stripped (`"0"` for bottom).
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(32);
        for byte in self.0 {
            s.push_str(&format!("{byte:02x}"));
        }
        let trimmed = s.trim_start_matches('0');
        if trimmed.is_empty() {
            "0".to_string()
        } else {
            trimmed.to_string()
        }
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() > 32 || s.is_empty() {
            return None;
        }
        let padded = format!("{s:0>32}");
        let mut b = [0u8; 16];
        for i in 0..16 {
            b[i] = u8::from_str_radix(&padded[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(WriterId(b))
    }
}

impl fmt::Debug for WriterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.to_hex())
    }
}

impl Serialize for WriterId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for WriterId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        WriterId::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad writer id"))
    }
}

// ---------------------------------------------------------------------------
// Tags
// ---------------------------------------------------------------------------

/// Logical version of an object: a timestamp paired with the id of the writer
/// that produced it. Tags order lexicographically, timestamp first, writer id
/// breaking ties, which yields a strict total order over all writes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag {
    pub ts: u64,
    pub wid: WriterId,
}

impl Tag {
    /// The initial tag, minimum of the order.
    pub const ZERO: Tag = Tag {
        ts: 0,
        wid: WriterId::BOTTOM,
    };

    pub fn new(ts: u64, wid: WriterId) -> Self {
        Tag { ts, wid }
    }

    /// The tag a successful write by `wid` produces on top of `self`.
    pub fn incremented(&self, wid: WriterId) -> Tag {
        Tag {
            ts: self.ts + 1,
            wid,
        }
    }

    /// Canonical binary encoding: 8-byte big-endian timestamp followed by the
    /// 16 raw writer-id bytes. Byte-wise comparison of encodings matches tag
    /// order, and the layout is shared by every wire and log format.
    pub fn encode(&self) -> [u8; 24] {
        let mut out = [0u8; 24];
        out[..8].copy_from_slice(&self.ts.to_be_bytes());
        out[8..].copy_from_slice(&self.wid.0);
        out
    }

    pub fn decode(b: &[u8]) -> Option<Tag> {
        if b.len() < 24 {
            return None;
        }
        let mut ts = [0u8; 8];
        ts.copy_from_slice(&b[..8]);
        let mut wid = [0u8; 16];
        wid.copy_from_slice(&b[8..24]);
        Some(Tag {
            ts: u64::from_be_bytes(ts),
            wid: WriterId(wid),
        })
    }

    pub const WIRE_LEN: usize = 24;
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.ts, self.wid.to_hex())
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.ts, self.wid.to_hex())
    }
}

impl Tag {
    pub fn parse(s: &str) -> Option<Tag> {
        let (ts, wid) = s.split_once('.')?;
        Some(Tag {
            ts: ts.parse().ok()?,
            wid: WriterId::from_hex(wid)?,
        })
    }
}

impl Serialize for Tag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Tag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Tag::parse(&s).ok_or_else(|| serde::de::Error::custom("bad tag"))
    }
}

/// A tag together with the value it versions. `(Tag::ZERO, empty)` is the
/// distinguished initial pair of every object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedValue {
    pub tag: Tag,
    pub value: Arc<Vec<u8>>,
}

impl TaggedValue {
    pub fn initial() -> Self {
        TaggedValue {
            tag: Tag::ZERO,
            value: Arc::new(Vec::new()),
        }
    }

    pub fn new(tag: Tag, value: Vec<u8>) -> Self {
        TaggedValue {
            tag,
            value: Arc::new(value),
        }
    }

    /// Picks the pair with the larger tag; `other` wins ties.
    pub fn max_by_tag(self, other: TaggedValue) -> TaggedValue {
        if other.tag >= self.tag {
            other
        } else {
            self
        }
    }
}

// ---------------------------------------------------------------------------
// Nodes and configurations
// ---------------------------------------------------------------------------

/// Identity of a process in the service: a server or a client.
pub type NodeId = u32;

/// Identity of a configuration. Fresh configurations mint a new id even when
/// server set and parameters repeat, so an id names exactly one sequence slot
/// candidate for the lifetime of a run.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize,
)]
pub struct ConfigId(pub u64);

impl ConfigId {
    pub const INITIAL: ConfigId = ConfigId(0);

    /// Ids minted by reconfiguration client `node`: high half is the node,
    /// low half a per-node counter starting at 1.
    pub fn minted(node: NodeId, counter: u32) -> Self {
        ConfigId(((node as u64) << 32) | counter as u64)
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Which data-access-primitive family a configuration runs.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum DapKind {
    /// Majority-quorum full replication.
    Abd,
    /// Erasure-coded lists without the transfer optimization: servers return
    /// whole lists, trimmed tags remain as placeholders.
    EcClassic,
    /// Erasure-coded lists where servers filter by the client's known tag and
    /// trimming removes superseded entries entirely.
    EcOpt,
}

impl DapKind {
    pub fn is_erasure_coded(&self) -> bool {
        !matches!(self, DapKind::Abd)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DapKind::Abd => "abd",
            DapKind::EcClassic => "ec-classic",
            DapKind::EcOpt => "ec",
        }
    }
}

/// Errors constructing a configuration.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("configuration needs at least one server")]
    NoServers,
    #[error("erasure coding supports at most 255 servers, got {0}")]
    TooManyServers(usize),
    #[error("data fragment count k={k} invalid for n={n} servers")]
    BadK { n: usize, k: usize },
    #[error("k={k} must exceed n/3 (n={n}) for liveness")]
    KTooSmall { n: usize, k: usize },
    #[error("delta must be at least 1")]
    BadDelta,
    #[error("duplicate server id in configuration")]
    DuplicateServer,
}

/// A server set plus the quorum rule, DAP kind and coding parameters that
/// govern how clients access it. The consensus instance deciding this
/// configuration's successor runs on its servers, scoped by `id`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub id: ConfigId,
    pub servers: Vec<NodeId>,
    pub dap_kind: DapKind,
    /// Data-fragment count. Forced to 1 for ABD.
    pub k: usize,
    /// Bound on put-data operations concurrent with any get-data; sizes the
    /// server tag lists at `delta + 1`. Meaningful for EC kinds only.
    pub delta: usize,
}

impl Configuration {
    pub fn new(
        id: ConfigId,
        servers: Vec<NodeId>,
        dap_kind: DapKind,
        k: usize,
        delta: usize,
    ) -> Result<Self, ConfigError> {
        let n = servers.len();
        if n == 0 {
            return Err(ConfigError::NoServers);
        }
        let mut dedup = servers.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != n {
            return Err(ConfigError::DuplicateServer);
        }
        if dap_kind.is_erasure_coded() {
            if n > 255 {
                return Err(ConfigError::TooManyServers(n));
            }
            if k == 0 || k > n {
                return Err(ConfigError::BadK { n, k });
            }
            if 3 * k <= n {
                return Err(ConfigError::KTooSmall { n, k });
            }
            if delta == 0 {
                return Err(ConfigError::BadDelta);
            }
            Ok(Configuration {
                id,
                servers,
                dap_kind,
                k,
                delta,
            })
        } else {
            Ok(Configuration {
                id,
                servers,
                dap_kind,
                k: 1,
                delta: delta.max(1),
            })
        }
    }

    pub fn n(&self) -> usize {
        self.servers.len()
    }

    /// Replies needed to complete a phase: `⌈(n+k)/2⌉` under erasure coding,
    /// `⌊n/2⌋ + 1` under ABD.
    pub fn quorum_size(&self) -> usize {
        let n = self.n();
        match self.dap_kind {
            DapKind::Abd => n / 2 + 1,
            DapKind::EcClassic | DapKind::EcOpt => (n + self.k).div_ceil(2),
        }
    }

    /// Crashes the configuration tolerates while every operation still
    /// completes: `⌊(n-k)/2⌋` under erasure coding, `⌈n/2⌉ - 1` under ABD.
    pub fn fault_bound(&self) -> usize {
        let n = self.n();
        match self.dap_kind {
            DapKind::Abd => n - (n / 2 + 1),
            DapKind::EcClassic | DapKind::EcOpt => (n - self.k) / 2,
        }
    }

    /// Position of a server inside the ordered server set; determines which
    /// coded element the server stores.
    pub fn server_index(&self, node: NodeId) -> Option<usize> {
        self.servers.iter().position(|s| *s == node)
    }
}

/// Convenience for table-driven tests and the CLI: quorum size for explicit
/// parameters without building a full configuration.
pub fn quorum_size(n: usize, dap_kind: DapKind, k: usize) -> usize {
    match dap_kind {
        DapKind::Abd => n / 2 + 1,
        _ => (n + k).div_ceil(2),
    }
}

// ---------------------------------------------------------------------------
// Configuration sequences
// ---------------------------------------------------------------------------

/// Lifecycle stage of a configuration-sequence entry.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum ConfigStatus {
    /// Proposed: decided by consensus, data migration may be in flight.
    P,
    /// Finalized: data has been transferred in, safe to retire predecessors.
    F,
}

/// One slot of a configuration sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigSequenceEntry {
    pub config: ConfigId,
    pub status: ConfigStatus,
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// Identity of a fragmented object (a file).
pub type FileId = u64;

/// Globally unique block identity: the owning file, the creating client and
/// that client's per-file creation counter.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId {
    pub fid: FileId,
    pub clid: WriterId,
    pub clseq: u64,
}

impl BlockId {
    /// The genesis block of a file: bottom client, counter zero. Also doubles
    /// as the object id of a non-fragmented register for the same file id.
    pub fn genesis(fid: FileId) -> Self {
        BlockId {
            fid,
            clid: WriterId::BOTTOM,
            clseq: 0,
        }
    }

    pub fn is_genesis(&self) -> bool {
        self.clid.is_bottom() && self.clseq == 0
    }

    pub const WIRE_LEN: usize = 8 + WriterId::LEN + 8;

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.fid.to_be_bytes());
        out.extend_from_slice(&self.clid.0);
        out.extend_from_slice(&self.clseq.to_be_bytes());
    }

    pub fn decode(b: &[u8]) -> Option<BlockId> {
        if b.len() < Self::WIRE_LEN {
            return None;
        }
        let fid = u64::from_be_bytes(b[..8].try_into().ok()?);
        let mut clid = [0u8; 16];
        clid.copy_from_slice(&b[8..24]);
        let clseq = u64::from_be_bytes(b[24..32].try_into().ok()?);
        Some(BlockId {
            fid,
            clid: WriterId(clid),
            clseq,
        })
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.fid, self.clid.to_hex(), self.clseq)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.fid, self.clid.to_hex(), self.clseq)
    }
}

impl BlockId {
    pub fn parse(s: &str) -> Option<BlockId> {
        let mut it = s.split(':');
        let fid = it.next()?.parse().ok()?;
        let clid = WriterId::from_hex(it.next()?)?;
        let clseq = it.next()?.parse().ok()?;
        if it.next().is_some() {
            return None;
        }
        Some(BlockId { fid, clid, clseq })
    }
}

impl Serialize for BlockId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BlockId::parse(&s).ok_or_else(|| serde::de::Error::custom("bad block id"))
    }
}

/// The value stored in a block register: payload bytes plus the pointer to
/// the next block in the chain. Serialized with [`BlockVal::encode`] before
/// it enters the shared memory layer.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BlockVal {
    pub ptr: Option<BlockId>,
    pub data: Vec<u8>,
}

impl BlockVal {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + BlockId::WIRE_LEN + self.data.len());
        match self.ptr {
            Some(ref id) => {
                out.push(1);
                id.encode_into(&mut out);
            }
            None => out.push(0),
        }
        out.extend_from_slice(&self.data);
        out
    }

    /// The empty byte string decodes to the empty block value, matching the
    /// initial register value of every object.
    pub fn decode(b: &[u8]) -> Option<BlockVal> {
        if b.is_empty() {
            return Some(BlockVal::default());
        }
        match b[0] {
            0 => Some(BlockVal {
                ptr: None,
                data: b[1..].to_vec(),
            }),
            1 => {
                let ptr = BlockId::decode(&b[1..])?;
                Some(BlockVal {
                    ptr: Some(ptr),
                    data: b[1 + BlockId::WIRE_LEN..].to_vec(),
                })
            }
            _ => None,
        }
    }
}

/// A materialized block as returned by a file read: identity, decoded value
/// and the version tag the shared memory layer attached to it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub id: BlockId,
    pub data: Vec<u8>,
    pub ptr: Option<BlockId>,
    pub version: Tag,
}

// ---------------------------------------------------------------------------
// Write outcomes
// ---------------------------------------------------------------------------

/// Deliberately seeded defects for validating that each history checker
/// catches its designated bug class. Production paths run with `None`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mutation {
    /// Coverable writes skip the version-equality check and always install.
    SkipVersionCheck,
    /// Servers trim their tag lists below the delta bound.
    TrimBelowDelta,
    /// Erasure-coded operations wait on bare majorities instead of ⌈(n+k)/2⌉.
    MajorityQuorumForEc,
}

/// Whether a coverable write installed its value or degraded to a read.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum WriteFlag {
    /// The value was installed under a fresh tag.
    Chg,
    /// The submitted version was stale; the operation returned the observed
    /// latest pair instead.
    Unchg,
}

impl WriteFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            WriteFlag::Chg => "chg",
            WriteFlag::Unchg => "unchg",
        }
    }
}

/// Result of a coverable write.
#[derive(Clone, Debug)]
pub struct WriteOutcome {
    pub tagged: TaggedValue,
    pub flag: WriteFlag,
}
