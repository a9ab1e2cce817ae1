//! Replica server state machine.
//!
//! A server hosts, per (object, configuration) pair it is a member of: the
//! register state for the configuration's DAP kind, the `nextC` cell that
//! names the successor configuration, and the acceptor side of the consensus
//! instance deciding that successor. Handlers are deterministic functions of
//! (state, message) and run to completion one message at a time.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::codec::CodedElement;
use crate::types::{
    BlockId, ConfigId, ConfigStatus, Configuration, DapKind, Mutation, NodeId, Tag,
};
use crate::wire::{Ballot, Envelope, ListPayload, Payload, PutContent};

/// Local protocol-violation detections. Any of these aborts the run for
/// triage; they indicate a broken client, codec misuse or a consensus breach.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ServerFault {
    #[error("put-data for tag {tag} carries an element that differs from the stored one")]
    CorruptPut { tag: Tag },
    #[error("next-config cell already holds {held}, rejected conflicting {proposed}")]
    NextConflict { held: ConfigId, proposed: ConfigId },
    #[error("message kind does not match the configuration's DAP kind")]
    KindMismatch,
}

// ---------------------------------------------------------------------------
// Register states
// ---------------------------------------------------------------------------

/// Erasure-coded register replica: a bounded list of (tag, coded element)
/// pairs. Under the classic variant, garbage-collected tags remain as bottom
/// markers; under the optimized variant they are removed outright.
#[derive(Clone, Debug)]
pub struct EcServerState {
    pub entries: BTreeMap<Tag, Option<Arc<CodedElement>>>,
    pub delta: usize,
    pub classic: bool,
}

impl EcServerState {
    pub fn new(initial: CodedElement, delta: usize, classic: bool) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert(Tag::ZERO, Some(Arc::new(initial)));
        EcServerState {
            entries,
            delta,
            classic,
        }
    }

    /// Number of entries still carrying a coded element.
    pub fn value_count(&self) -> usize {
        self.entries.values().filter(|v| v.is_some()).count()
    }

    /// QUERY-LIST under the optimized variant: entries above the requester's
    /// tag travel with their element, the requester's own tag travels as a
    /// bottom marker, older entries are withheld. State is unchanged.
    pub fn on_query_list(&self, known: Tag) -> Vec<(Tag, ListPayload)> {
        let mut out = Vec::new();
        for (tag, elem) in &self.entries {
            if *tag > known {
                if let Some(e) = elem {
                    out.push((*tag, ListPayload::Element(e.clone())));
                } else {
                    // Classic-trimmed marker; only reachable when a
                    // configuration switches variants, which does not happen:
                    // markers exist only under classic servers.
                    out.push((*tag, ListPayload::Bottom));
                }
            } else if *tag == known {
                out.push((*tag, ListPayload::Bottom));
            }
        }
        out
    }

    /// QUERY-LIST under the classic variant: the full list, markers included.
    pub fn full_list(&self) -> Vec<(Tag, ListPayload)> {
        self.entries
            .iter()
            .map(|(tag, elem)| match elem {
                Some(e) => (*tag, ListPayload::Element(e.clone())),
                None => (*tag, ListPayload::Bottom),
            })
            .collect()
    }

    pub fn max_tag(&self) -> Tag {
        *self.entries.keys().next_back().expect("list never empty")
    }

    /// PUT-DATA: insert, then trim the smallest tags down to `delta + 1`
    /// stored elements. The optimized variant drops trimmed entries entirely;
    /// the classic one leaves a bottom marker per trimmed tag.
    pub fn on_put_data(
        &mut self,
        tag: Tag,
        elem: Arc<CodedElement>,
        mutation: Option<Mutation>,
    ) -> Result<(), ServerFault> {
        match self.entries.get(&tag) {
            Some(Some(existing)) => {
                if **existing != *elem {
                    return Err(ServerFault::CorruptPut { tag });
                }
                return Ok(()); // idempotent re-delivery
            }
            Some(None) => return Ok(()), // already garbage-collected
            None => {
                self.entries.insert(tag, Some(elem));
            }
        }
        let cap = if mutation == Some(Mutation::TrimBelowDelta) {
            self.delta.saturating_sub(1).max(1)
        } else {
            self.delta + 1
        };
        if self.classic {
            while self.value_count() > cap {
                let min = *self
                    .entries
                    .iter()
                    .find(|(_, v)| v.is_some())
                    .expect("value present")
                    .0;
                self.entries.insert(min, None);
            }
        } else {
            while self.entries.len() > cap {
                self.entries.pop_first();
            }
        }
        Ok(())
    }
}

/// ABD register replica: the single highest (tag, value) pair seen so far.
#[derive(Clone, Debug)]
pub struct AbdServerState {
    pub tag: Tag,
    pub value: Arc<Vec<u8>>,
}

impl AbdServerState {
    pub fn new() -> Self {
        AbdServerState {
            tag: Tag::ZERO,
            value: Arc::new(Vec::new()),
        }
    }

    pub fn on_read(&self) -> (Tag, Arc<Vec<u8>>) {
        (self.tag, self.value.clone())
    }

    /// Installs the pair iff its tag is larger; acknowledged either way.
    pub fn on_write(&mut self, tag: Tag, value: Arc<Vec<u8>>) {
        if tag > self.tag {
            self.tag = tag;
            self.value = value;
        }
    }
}

impl Default for AbdServerState {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Successor pointer
// ---------------------------------------------------------------------------

/// The `nextC` cell: which configuration follows this one, and whether it has
/// been finalized. The configuration value never changes once set; status
/// only ever upgrades P to F.
#[derive(Clone, Debug, Default)]
pub struct NextConfigCell {
    pub next: Option<(ConfigId, ConfigStatus)>,
}

impl NextConfigCell {
    pub fn on_read(&self) -> Option<(ConfigId, ConfigStatus)> {
        self.next
    }

    pub fn on_write(
        &mut self,
        config: ConfigId,
        status: ConfigStatus,
    ) -> Result<(), ServerFault> {
        match self.next {
            None => {
                self.next = Some((config, status));
                Ok(())
            }
            Some((held, old_status)) if held == config => {
                self.next = Some((held, old_status.max(status)));
                Ok(())
            }
            Some((held, _)) => Err(ServerFault::NextConflict {
                held,
                proposed: config,
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Consensus acceptor
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct AcceptorState {
    pub promised: Option<Ballot>,
    pub accepted: Option<(Ballot, ConfigId)>,
}

impl AcceptorState {
    pub fn on_prepare(&mut self, ballot: Ballot) -> Payload {
        if let Some(p) = self.promised {
            if p > ballot {
                return Payload::Promise {
                    granted: false,
                    promised: p,
                    accepted: self.accepted,
                };
            }
        }
        self.promised = Some(ballot);
        Payload::Promise {
            granted: true,
            promised: ballot,
            accepted: self.accepted,
        }
    }

    pub fn on_accept(&mut self, ballot: Ballot, value: ConfigId) -> Payload {
        if let Some(p) = self.promised {
            if p > ballot {
                return Payload::Accepted { granted: false };
            }
        }
        self.promised = Some(ballot);
        self.accepted = Some((ballot, value));
        Payload::Accepted { granted: true }
    }
}

// ---------------------------------------------------------------------------
// Per-server dispatcher
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum RegisterState {
    Abd(AbdServerState),
    Ec(EcServerState),
}

#[derive(Clone, Debug)]
struct ObjectState {
    register: RegisterState,
    next: NextConfigCell,
    acceptor: AcceptorState,
}

/// One replica server: a map of per-(object, configuration) states plus the
/// optional seeded defect used by the checker-validation suites.
pub struct ReplicaServer {
    pub id: NodeId,
    objects: BTreeMap<(BlockId, ConfigId), ObjectState>,
    mutation: Option<Mutation>,
}

impl ReplicaServer {
    pub fn new(id: NodeId, mutation: Option<Mutation>) -> Self {
        ReplicaServer {
            id,
            objects: BTreeMap::new(),
            mutation,
        }
    }

    fn object_state(&mut self, object: BlockId, cfg: &Configuration) -> &mut ObjectState {
        let key = (object, cfg.id);
        if !self.objects.contains_key(&key) {
            let register = match cfg.dap_kind {
                DapKind::Abd => RegisterState::Abd(AbdServerState::new()),
                DapKind::EcClassic | DapKind::EcOpt => {
                    let index = cfg
                        .server_index(self.id)
                        .expect("server is a member of the configuration");
                    // Initial list entry: this server's projection of the
                    // empty initial value.
                    let initial = crate::codec::encode(&[], cfg.n(), cfg.k)
                        .expect("valid configuration parameters")
                        .swap_remove(index);
                    RegisterState::Ec(EcServerState::new(
                        initial,
                        cfg.delta,
                        cfg.dap_kind == DapKind::EcClassic,
                    ))
                }
            };
            self.objects.insert(
                key,
                ObjectState {
                    register,
                    next: NextConfigCell::default(),
                    acceptor: AcceptorState::default(),
                },
            );
        }
        self.objects.get_mut(&key).expect("just inserted")
    }

    /// Processes one message, returning the replies to send. `cfg` must be
    /// the configuration named by the envelope.
    pub fn handle(
        &mut self,
        env: &Envelope,
        cfg: &Configuration,
    ) -> Result<Vec<Envelope>, ServerFault> {
        debug_assert_eq!(env.config, cfg.id);
        let me = self.id;
        let mutation = self.mutation;
        let state = self.object_state(env.object, cfg);
        let reply_payload = match &env.payload {
            Payload::QueryTag => {
                let tag = match &state.register {
                    RegisterState::Abd(r) => r.tag,
                    RegisterState::Ec(r) => r.max_tag(),
                };
                Payload::TagReply { tag }
            }
            Payload::QueryList { known } => {
                let entries = match &state.register {
                    RegisterState::Abd(r) => {
                        let (tag, value) = r.on_read();
                        vec![(tag, ListPayload::Value(value))]
                    }
                    RegisterState::Ec(r) => {
                        if r.classic {
                            r.full_list()
                        } else {
                            r.on_query_list(*known)
                        }
                    }
                };
                Payload::ListReply { entries }
            }
            Payload::PutData { tag, content } => {
                match (&mut state.register, content) {
                    (RegisterState::Abd(r), PutContent::Value(v)) => {
                        r.on_write(*tag, v.clone());
                    }
                    (RegisterState::Ec(r), PutContent::Element(e)) => {
                        r.on_put_data(*tag, Arc::new(e.clone()), mutation)?;
                    }
                    _ => return Err(ServerFault::KindMismatch),
                }
                Payload::PutAck
            }
            Payload::ReadNext => Payload::NextReply {
                next: state.next.on_read(),
            },
            Payload::WriteNext { config, status } => {
                state.next.on_write(*config, *status)?;
                Payload::WriteNextAck
            }
            Payload::Prepare { ballot } => state.acceptor.on_prepare(*ballot),
            Payload::Accept { ballot, value } => state.acceptor.on_accept(*ballot, *value),
            // Replies are never addressed to servers.
            _ => return Ok(Vec::new()),
        };
        Ok(vec![Envelope {
            from: me,
            to: env.from,
            config: env.config,
            object: env.object,
            op: env.op,
            payload: reply_payload,
        }])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode as rs_encode;
    use crate::types::WriterId;

    fn tag(ts: u64, w: u64) -> Tag {
        Tag::new(ts, WriterId::from_index(w))
    }

    fn elem(v: &[u8], n: usize, k: usize, i: usize) -> Arc<CodedElement> {
        Arc::new(rs_encode(v, n, k).unwrap().swap_remove(i))
    }

    fn ec_state(delta: usize, classic: bool) -> EcServerState {
        EcServerState::new(rs_encode(&[], 3, 2).unwrap().swap_remove(0), delta, classic)
    }

    #[test]
    fn query_list_filters_by_known_tag() {
        let mut s = ec_state(2, false);
        // Initial list holds only (t0, e); equality yields a bottom marker.
        let out = s.on_query_list(Tag::ZERO);
        assert_eq!(out.len(), 1);
        assert!(matches!(out[0].1, ListPayload::Bottom));

        s.on_put_data(tag(1, 1), elem(b"x", 3, 2, 0), None).unwrap();
        let out = s.on_query_list(Tag::ZERO);
        assert_eq!(out.len(), 2);
        assert!(matches!(out[0].1, ListPayload::Bottom)); // t0 == known
        assert!(matches!(out[1].1, ListPayload::Element(_))); // newer travels

        // Known tag above everything: empty reply.
        let out = s.on_query_list(tag(9, 9));
        assert!(out.is_empty());
    }

    #[test]
    fn put_data_trims_minimum_tags() {
        // delta = 1: capacity two entries. Sequential puts t1 < t2 < t3 leave
        // exactly {t2, t3}.
        let mut s = ec_state(1, false);
        for ts in 1..=3 {
            s.on_put_data(tag(ts, 1), elem(&[ts as u8], 3, 2, 0), None)
                .unwrap();
        }
        let tags: Vec<Tag> = s.entries.keys().copied().collect();
        assert_eq!(tags, vec![tag(2, 1), tag(3, 1)]);
    }

    #[test]
    fn put_data_no_trim_within_capacity() {
        let mut s = ec_state(2, false);
        s.on_put_data(tag(1, 1), elem(b"a", 3, 2, 0), None).unwrap();
        assert_eq!(s.entries.len(), 2); // {t0, t1}, capacity 3
        assert_eq!(s.value_count(), 2);
    }

    #[test]
    fn put_data_idempotent() {
        let mut s = ec_state(2, false);
        let e = elem(b"a", 3, 2, 0);
        s.on_put_data(tag(1, 1), e.clone(), None).unwrap();
        let before: Vec<Tag> = s.entries.keys().copied().collect();
        s.on_put_data(tag(1, 1), e, None).unwrap();
        let after: Vec<Tag> = s.entries.keys().copied().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn put_data_detects_corruption() {
        let mut s = ec_state(2, false);
        s.on_put_data(tag(1, 1), elem(b"a", 3, 2, 0), None).unwrap();
        let err = s.on_put_data(tag(1, 1), elem(b"b", 3, 2, 0), None);
        assert_eq!(err, Err(ServerFault::CorruptPut { tag: tag(1, 1) }));
    }

    #[test]
    fn classic_trim_leaves_markers() {
        let mut s = ec_state(1, true);
        for ts in 1..=3 {
            s.on_put_data(tag(ts, 1), elem(&[ts as u8], 3, 2, 0), None)
                .unwrap();
        }
        // Two stored elements, older tags demoted to markers but retained.
        assert_eq!(s.value_count(), 2);
        assert_eq!(s.entries.len(), 4);
        assert_eq!(s.entries[&Tag::ZERO], None);
        assert_eq!(s.entries[&tag(1, 1)], None);
        // Full list exposes the markers.
        let list = s.full_list();
        assert_eq!(list.len(), 4);
        assert!(matches!(list[0].1, ListPayload::Bottom));
    }

    #[test]
    fn abd_register_is_tag_monotone() {
        let mut r = AbdServerState::new();
        assert_eq!(r.on_read().0, Tag::ZERO);
        r.on_write(tag(1, 1), Arc::new(vec![1]));
        r.on_write(tag(0, 2), Arc::new(vec![2]));
        assert_eq!(r.on_read(), (tag(1, 1), Arc::new(vec![1])));
        // Concurrent writes with equal timestamps resolve by writer id in
        // either delivery order.
        for order in [[1u64, 2], [2, 1]] {
            let mut r = AbdServerState::new();
            for w in order {
                r.on_write(tag(2, w), Arc::new(vec![w as u8]));
            }
            assert_eq!(r.on_read().0, tag(2, 2));
        }
    }

    #[test]
    fn next_cell_upgrade_and_conflict() {
        let mut cell = NextConfigCell::default();
        assert_eq!(cell.on_read(), None);
        cell.on_write(ConfigId(1), ConfigStatus::P).unwrap();
        cell.on_write(ConfigId(1), ConfigStatus::F).unwrap();
        assert_eq!(cell.on_read(), Some((ConfigId(1), ConfigStatus::F)));
        // F never regresses to P.
        cell.on_write(ConfigId(1), ConfigStatus::P).unwrap();
        assert_eq!(cell.on_read(), Some((ConfigId(1), ConfigStatus::F)));
        // A different configuration at the same position is a breach.
        let err = cell.on_write(ConfigId(2), ConfigStatus::P);
        assert_eq!(
            err,
            Err(ServerFault::NextConflict {
                held: ConfigId(1),
                proposed: ConfigId(2)
            })
        );
    }

    #[test]
    fn acceptor_orders_ballots() {
        let mut a = AcceptorState::default();
        let b1 = Ballot { counter: 1, node: 1 };
        let b2 = Ballot { counter: 2, node: 2 };
        assert!(matches!(a.on_prepare(b2), Payload::Promise { granted: true, .. }));
        assert!(matches!(a.on_prepare(b1), Payload::Promise { granted: false, .. }));
        assert!(matches!(a.on_accept(b1, ConfigId(5)), Payload::Accepted { granted: false }));
        assert!(matches!(a.on_accept(b2, ConfigId(5)), Payload::Accepted { granted: true }));
        assert_eq!(a.accepted, Some((b2, ConfigId(5))));
    }

    #[test]
    fn handlers_are_deterministic() {
        let cfg =
            Configuration::new(ConfigId(0), vec![1, 2, 3], DapKind::EcOpt, 2, 1).unwrap();
        let env = Envelope {
            from: 100,
            to: 1,
            config: ConfigId(0),
            object: BlockId::genesis(1),
            op: 1,
            payload: Payload::QueryList { known: Tag::ZERO },
        };
        let run = || {
            let mut s = ReplicaServer::new(1, None);
            let replies = s.handle(&env, &cfg).unwrap();
            replies[0].encode()
        };
        assert_eq!(run(), run());
    }
}
