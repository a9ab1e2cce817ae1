//! Wire-level message formats shared by the simulator and the socket
//! transport.
//!
//! Every message is an [`Envelope`]: a fixed header carrying the sender, the
//! destination, the configuration scope, the target object and the uuid of
//! the client operation it belongs to, followed by one verb payload. The
//! binary encoding is canonical (big-endian, fixed field order) so byte
//! accounting and socket framing agree exactly.

use std::sync::Arc;

use crate::codec::CodedElement;
use crate::types::{BlockId, ConfigId, ConfigStatus, NodeId, Tag};

/// Identifier of one client operation: issuing node in the high half, a
/// per-node counter in the low half.
pub type OpUuid = u64;

pub fn op_uuid(node: NodeId, counter: u32) -> OpUuid {
    ((node as u64) << 32) | counter as u64
}

/// Consensus round identifier; orders by counter, proposer id breaking ties.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct Ballot {
    pub counter: u32,
    pub node: NodeId,
}

impl Ballot {
    pub const WIRE_LEN: usize = 8;
}

/// Entry of a list reply: a tag plus either the stored payload or a bottom
/// marker standing in for a payload the receiver is known to hold (or that
/// the server has garbage-collected, under the classic EC variant).
#[derive(Clone, Debug)]
pub enum ListPayload {
    /// Coded element, EC configurations.
    Element(Arc<CodedElement>),
    /// Full replicated value, ABD configurations.
    Value(Arc<Vec<u8>>),
    /// `(tag, ⊥)`.
    Bottom,
}

impl ListPayload {
    pub fn wire_len(&self) -> usize {
        // Elements inside a list need a length prefix; entries are
        // concatenated and the element payload itself is unframed.
        1 + match self {
            ListPayload::Element(e) => 4 + e.wire_len(),
            ListPayload::Value(v) => 8 + v.len(),
            ListPayload::Bottom => 0,
        }
    }

    pub fn has_payload(&self) -> bool {
        !matches!(self, ListPayload::Bottom)
    }
}

/// Body of a put-data message.
#[derive(Clone, Debug)]
pub enum PutContent {
    Element(CodedElement),
    Value(Arc<Vec<u8>>),
}

impl PutContent {
    pub fn wire_len(&self) -> usize {
        1 + match self {
            PutContent::Element(e) => e.wire_len(),
            PutContent::Value(v) => 8 + v.len(),
        }
    }
}

/// The verb set. QUERY-TAG / QUERY-LIST / PUT-DATA and their replies serve
/// the data access primitives; READ-NEXT / WRITE-NEXT maintain the successor
/// pointers driving reconfiguration; the four consensus verbs implement the
/// single-decree protocol each configuration hosts.
#[derive(Clone, Debug)]
pub enum Payload {
    QueryTag,
    TagReply { tag: Tag },
    /// `known` is the requester's cached tag; servers running the optimized
    /// EC variant filter their reply against it, others ignore it.
    QueryList { known: Tag },
    ListReply { entries: Vec<(Tag, ListPayload)> },
    PutData { tag: Tag, content: PutContent },
    PutAck,
    ReadNext,
    NextReply { next: Option<(ConfigId, ConfigStatus)> },
    WriteNext { config: ConfigId, status: ConfigStatus },
    WriteNextAck,
    Prepare { ballot: Ballot },
    Promise { granted: bool, promised: Ballot, accepted: Option<(Ballot, ConfigId)> },
    Accept { ballot: Ballot, value: ConfigId },
    Accepted { granted: bool },
}

impl Payload {
    fn verb_byte(&self) -> u8 {
        match self {
            Payload::QueryTag => 0,
            Payload::TagReply { .. } => 1,
            Payload::QueryList { .. } => 2,
            Payload::ListReply { .. } => 3,
            Payload::PutData { .. } => 4,
            Payload::PutAck => 5,
            Payload::ReadNext => 6,
            Payload::NextReply { .. } => 7,
            Payload::WriteNext { .. } => 8,
            Payload::WriteNextAck => 9,
            Payload::Prepare { .. } => 10,
            Payload::Promise { .. } => 11,
            Payload::Accept { .. } => 12,
            Payload::Accepted { .. } => 13,
        }
    }

    pub fn verb_name(&self) -> &'static str {
        match self {
            Payload::QueryTag => "QUERY-TAG",
            Payload::TagReply { .. } => "TAG-REPLY",
            Payload::QueryList { .. } => "QUERY-LIST",
            Payload::ListReply { .. } => "LIST-REPLY",
            Payload::PutData { .. } => "PUT-DATA",
            Payload::PutAck => "PUT-ACK",
            Payload::ReadNext => "READ-NEXT",
            Payload::NextReply { .. } => "NEXT-REPLY",
            Payload::WriteNext { .. } => "WRITE-NEXT",
            Payload::WriteNextAck => "WRITE-NEXT-ACK",
            Payload::Prepare { .. } => "CONSENSUS-PREPARE",
            Payload::Promise { .. } => "CONSENSUS-PROMISE",
            Payload::Accept { .. } => "CONSENSUS-ACCEPT",
            Payload::Accepted { .. } => "CONSENSUS-ACCEPTED",
        }
    }

    pub fn wire_len(&self) -> usize {
        match self {
            Payload::QueryTag | Payload::PutAck | Payload::ReadNext | Payload::WriteNextAck => 0,
            Payload::TagReply { .. } | Payload::QueryList { .. } => Tag::WIRE_LEN,
            Payload::ListReply { entries } => {
                2 + entries
                    .iter()
                    .map(|(_, p)| Tag::WIRE_LEN + p.wire_len())
                    .sum::<usize>()
            }
            Payload::PutData { content, .. } => Tag::WIRE_LEN + content.wire_len(),
            Payload::NextReply { next } => 1 + if next.is_some() { 9 } else { 0 },
            Payload::WriteNext { .. } => 9,
            Payload::Prepare { .. } => Ballot::WIRE_LEN,
            Payload::Promise { accepted, .. } => {
                1 + Ballot::WIRE_LEN + 1 + if accepted.is_some() { 16 } else { 0 }
            }
            Payload::Accept { .. } => Ballot::WIRE_LEN + 8,
            Payload::Accepted { .. } => 1,
        }
    }
}

/// A routable message.
#[derive(Clone, Debug)]
pub struct Envelope {
    pub from: NodeId,
    pub to: NodeId,
    pub config: ConfigId,
    pub object: BlockId,
    pub op: OpUuid,
    pub payload: Payload,
}

impl Envelope {
    /// from ‖ to ‖ config ‖ object ‖ op ‖ verb.
    pub const HEADER_LEN: usize = 4 + 4 + 8 + BlockId::WIRE_LEN + 8 + 1;

    pub fn wire_len(&self) -> usize {
        Self::HEADER_LEN + self.payload.wire_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.from.to_be_bytes());
        out.extend_from_slice(&self.to.to_be_bytes());
        out.extend_from_slice(&self.config.0.to_be_bytes());
        self.object.encode_into(&mut out);
        out.extend_from_slice(&self.op.to_be_bytes());
        out.push(self.payload.verb_byte());
        encode_payload(&self.payload, &mut out);
        debug_assert_eq!(out.len(), self.wire_len());
        out
    }

    pub fn decode(b: &[u8]) -> Option<Envelope> {
        if b.len() < Self::HEADER_LEN {
            return None;
        }
        let from = u32::from_be_bytes(b[0..4].try_into().ok()?);
        let to = u32::from_be_bytes(b[4..8].try_into().ok()?);
        let config = ConfigId(u64::from_be_bytes(b[8..16].try_into().ok()?));
        let object = BlockId::decode(&b[16..])?;
        let rest = &b[16 + BlockId::WIRE_LEN..];
        let op = u64::from_be_bytes(rest[..8].try_into().ok()?);
        let verb = rest[8];
        let payload = decode_payload(verb, &rest[9..])?;
        Some(Envelope {
            from,
            to,
            config,
            object,
            op,
            payload,
        })
    }
}

fn put_tag(out: &mut Vec<u8>, tag: &Tag) {
    out.extend_from_slice(&tag.encode());
}

fn put_ballot(out: &mut Vec<u8>, b: &Ballot) {
    out.extend_from_slice(&b.counter.to_be_bytes());
    out.extend_from_slice(&b.node.to_be_bytes());
}

fn status_byte(s: ConfigStatus) -> u8 {
    match s {
        ConfigStatus::P => 0,
        ConfigStatus::F => 1,
    }
}

fn encode_payload(p: &Payload, out: &mut Vec<u8>) {
    match p {
        Payload::QueryTag | Payload::PutAck | Payload::ReadNext | Payload::WriteNextAck => {}
        Payload::TagReply { tag } | Payload::QueryList { known: tag } => put_tag(out, tag),
        Payload::ListReply { entries } => {
            out.extend_from_slice(&(entries.len() as u16).to_be_bytes());
            for (tag, payload) in entries {
                put_tag(out, tag);
                match payload {
                    ListPayload::Element(e) => {
                        out.push(0);
                        out.extend_from_slice(&(e.wire_len() as u32).to_be_bytes());
                        e.encode_into(out);
                    }
                    ListPayload::Value(v) => {
                        out.push(1);
                        out.extend_from_slice(&(v.len() as u64).to_be_bytes());
                        out.extend_from_slice(v);
                    }
                    ListPayload::Bottom => out.push(2),
                }
            }
        }
        Payload::PutData { tag, content } => {
            put_tag(out, tag);
            match content {
                PutContent::Element(e) => {
                    out.push(0);
                    e.encode_into(out);
                }
                PutContent::Value(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_be_bytes());
                    out.extend_from_slice(v);
                }
            }
        }
        Payload::NextReply { next } => match next {
            None => out.push(0),
            Some((c, s)) => {
                out.push(1);
                out.extend_from_slice(&c.0.to_be_bytes());
                out.push(status_byte(*s));
            }
        },
        Payload::WriteNext { config, status } => {
            out.extend_from_slice(&config.0.to_be_bytes());
            out.push(status_byte(*status));
        }
        Payload::Prepare { ballot } => put_ballot(out, ballot),
        Payload::Promise {
            granted,
            promised,
            accepted,
        } => {
            out.push(*granted as u8);
            put_ballot(out, promised);
            match accepted {
                None => out.push(0),
                Some((b, v)) => {
                    out.push(1);
                    put_ballot(out, b);
                    out.extend_from_slice(&v.0.to_be_bytes());
                }
            }
        }
        Payload::Accept { ballot, value } => {
            put_ballot(out, ballot);
            out.extend_from_slice(&value.0.to_be_bytes());
        }
        Payload::Accepted { granted } => out.push(*granted as u8),
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return None;
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|s| u16::from_be_bytes(s.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_be_bytes(s.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|s| u64::from_be_bytes(s.try_into().unwrap()))
    }

    fn tag(&mut self) -> Option<Tag> {
        self.take(Tag::WIRE_LEN).and_then(Tag::decode)
    }

    fn ballot(&mut self) -> Option<Ballot> {
        Some(Ballot {
            counter: self.u32()?,
            node: self.u32()?,
        })
    }

    fn status(&mut self) -> Option<ConfigStatus> {
        match self.u8()? {
            0 => Some(ConfigStatus::P),
            1 => Some(ConfigStatus::F),
            _ => None,
        }
    }

    /// Unframed trailing element, as carried by put-data.
    fn element(&mut self) -> Option<CodedElement> {
        let index = self.u16()?;
        let orig_len = self.u64()?;
        let payload = self.b[self.pos..].to_vec();
        self.pos = self.b.len();
        Some(CodedElement {
            index,
            orig_len,
            payload,
        })
    }
}

fn decode_payload(verb: u8, b: &[u8]) -> Option<Payload> {
    let mut r = Reader { b, pos: 0 };
    let p = match verb {
        0 => Payload::QueryTag,
        1 => Payload::TagReply { tag: r.tag()? },
        2 => Payload::QueryList { known: r.tag()? },
        3 => {
            let count = r.u16()? as usize;
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let tag = r.tag()?;
                let payload = match r.u8()? {
                    0 => {
                        let total = r.u32()? as usize;
                        let bytes = r.take(total)?;
                        ListPayload::Element(Arc::new(CodedElement::decode(bytes)?))
                    }
                    1 => {
                        let len = r.u64()? as usize;
                        ListPayload::Value(Arc::new(r.take(len)?.to_vec()))
                    }
                    2 => ListPayload::Bottom,
                    _ => return None,
                };
                entries.push((tag, payload));
            }
            Payload::ListReply { entries }
        }
        4 => {
            let tag = r.tag()?;
            let content = match r.u8()? {
                0 => PutContent::Element(r.element()?),
                1 => {
                    let len = r.u64()? as usize;
                    PutContent::Value(Arc::new(r.take(len)?.to_vec()))
                }
                _ => return None,
            };
            Payload::PutData { tag, content }
        }
        5 => Payload::PutAck,
        6 => Payload::ReadNext,
        7 => {
            let next = match r.u8()? {
                0 => None,
                1 => Some((ConfigId(r.u64()?), r.status()?)),
                _ => return None,
            };
            Payload::NextReply { next }
        }
        8 => Payload::WriteNext {
            config: ConfigId(r.u64()?),
            status: r.status()?,
        },
        9 => Payload::WriteNextAck,
        10 => Payload::Prepare { ballot: r.ballot()? },
        11 => {
            let granted = r.u8()? != 0;
            let promised = r.ballot()?;
            let accepted = match r.u8()? {
                0 => None,
                1 => Some((r.ballot()?, ConfigId(r.u64()?))),
                _ => return None,
            };
            Payload::Promise {
                granted,
                promised,
                accepted,
            }
        }
        12 => Payload::Accept {
            ballot: r.ballot()?,
            value: ConfigId(r.u64()?),
        },
        13 => Payload::Accepted { granted: r.u8()? != 0 },
        _ => return None,
    };
    Some(p)
}
