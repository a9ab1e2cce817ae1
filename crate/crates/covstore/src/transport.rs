//! Client-side transport abstraction.
//!
//! Protocol code (DAPs, reconfiguration, coverable operations, the
//! fragmentation layer) is written as async functions over [`Transport`].
//! The simulator drives these futures from its event loop; the socket
//! transport drives them from a blocking executor. Either way a client runs
//! one operation at a time, so a single inbox per node suffices and replies
//! are matched on the per-round uuid stamped into every message.

use crate::history::{Detail, EventKind, HistoryRecord};
use crate::types::{BlockId, ConfigId, Configuration, Mutation, NodeId, Tag};
use crate::wire::{Envelope, OpUuid, Payload};

/// One live client operation; scopes nest (a file update encloses coverable
/// writes, which enclose DAP calls).
#[derive(Clone, Copy, Debug)]
pub struct OpScope {
    pub uuid: OpUuid,
    pub kind: &'static str,
}

// Protocol futures are driven by single-threaded executors on both
// transports; no Send bound is wanted.
#[allow(async_fn_in_trait)]
pub trait Transport {
    fn node(&self) -> NodeId;
    fn name(&self) -> String;
    /// Virtual (simulator) or monotonic wall time, nanoseconds.
    fn now(&self) -> u64;
    fn send(&self, env: Envelope);
    /// Next message addressed to this node.
    async fn recv(&self) -> Envelope;
    async fn sleep(&self, nanos: u64);
    fn log(&self, rec: HistoryRecord);
    /// Resolves a configuration descriptor by id.
    fn lookup_config(&self, id: ConfigId) -> Configuration;
    /// Publishes a configuration descriptor before proposing it.
    fn register_config(&self, cfg: Configuration);
    fn mutation(&self) -> Option<Mutation> {
        None
    }
    fn fresh_uuid(&self) -> OpUuid;
    /// Reports a local protocol-violation detection; aborts simulated runs.
    fn fault(&self, info: String);
    fn push_scope(&self, scope: OpScope);
    fn pop_scope(&self) -> Option<OpScope>;
    /// Outermost live scope: the client-level operation messages are
    /// attributed to.
    fn root_scope(&self) -> Option<OpScope>;
    /// Innermost live scope.
    fn current_scope(&self) -> Option<OpScope>;
    fn rand_u64(&self) -> u64;
}

// ---------------------------------------------------------------------------
// Operation logging
// ---------------------------------------------------------------------------

/// Logs an invocation record, opens a scope and returns the operation uuid.
pub fn invoke_op<T: Transport>(
    t: &T,
    kind: &'static str,
    block: Option<BlockId>,
    config: Option<ConfigId>,
    detail: Option<Detail>,
) -> OpUuid {
    let uuid = t.fresh_uuid();
    let parent = t.current_scope().map(|s| s.uuid);
    let mut rec = HistoryRecord::new(t.now(), t.name(), EventKind::Invoke);
    rec.op = Some(kind.to_string());
    rec.block = block;
    rec.config = config.map(|c| c.0);
    rec.uuid = Some(uuid);
    let mut d = detail.unwrap_or_default();
    d.parent = parent;
    if d != Detail::default() {
        rec.detail = Some(d);
    }
    t.log(rec);
    t.push_scope(OpScope { uuid, kind });
    uuid
}

/// Fields of a response record.
#[derive(Default)]
pub struct Response {
    pub block: Option<BlockId>,
    pub config: Option<ConfigId>,
    pub tag: Option<Tag>,
    pub flag: Option<&'static str>,
    pub detail: Option<Detail>,
}

/// Logs the matching response record and closes the scope.
pub fn respond_op<T: Transport>(t: &T, kind: &'static str, uuid: OpUuid, resp: Response) {
    let scope = t.pop_scope();
    debug_assert!(matches!(scope, Some(s) if s.uuid == uuid), "scope mismatch");
    let mut rec = HistoryRecord::new(t.now(), t.name(), EventKind::Respond);
    rec.op = Some(kind.to_string());
    rec.block = resp.block;
    rec.config = resp.config.map(|c| c.0);
    rec.tag = resp.tag;
    rec.flag = resp.flag.map(|f| f.to_string());
    rec.uuid = Some(uuid);
    rec.detail = resp.detail;
    t.log(rec);
}

// ---------------------------------------------------------------------------
// Quorum rounds
// ---------------------------------------------------------------------------

/// Broadcasts one request to `targets` and folds replies until `fold`
/// signals completion. Replies are matched on a fresh per-round uuid, so
/// stragglers from earlier rounds are discarded. Never returns if the
/// completion condition stays unreachable; in the simulator that surfaces as
/// a stall report.
pub async fn quorum_round<T, A>(
    t: &T,
    config: ConfigId,
    object: BlockId,
    targets: &[NodeId],
    payload_for: impl Fn(NodeId) -> Payload,
    acc: &mut A,
    mut fold: impl FnMut(&mut A, &Envelope) -> bool,
) where
    T: Transport,
{
    let round = t.fresh_uuid();
    for &to in targets {
        t.send(Envelope {
            from: t.node(),
            to,
            config,
            object,
            op: round,
            payload: payload_for(to),
        });
    }
    loop {
        let env = t.recv().await;
        if env.op != round || env.config != config || env.object != object {
            continue;
        }
        if fold(acc, &env) {
            return;
        }
    }
}

/// Collects bare acknowledgements until `quorum` of them arrived.
pub async fn ack_round<T: Transport>(
    t: &T,
    config: ConfigId,
    object: BlockId,
    targets: &[NodeId],
    quorum: usize,
    payload: Payload,
    expect: impl Fn(&Payload) -> bool,
) {
    let mut acks = 0usize;
    quorum_round(
        t,
        config,
        object,
        targets,
        |_| payload.clone(),
        &mut acks,
        |acks, env| {
            if expect(&env.payload) {
                *acks += 1;
            }
            *acks >= quorum
        },
    )
    .await;
}
