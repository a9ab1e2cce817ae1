//! Configuration-sequence discovery and reconfiguration.
//!
//! Every object carries its own configuration sequence. Clients keep a local
//! view ([`LocalCseq`]) and extend it by traversing successor pointers:
//! starting from the last locally finalized slot, each configuration's
//! servers are asked for their `nextC` cells until a quorum at the frontier
//! reports none. Reconfiguration appends to the sequence in four steps:
//! traverse, decide the successor through the predecessor's consensus
//! instance, migrate the newest tag-value pair into the new configuration,
//! finalize.

use std::collections::BTreeMap;

use crate::dap::{self, DapCache};
use crate::history::{ops, Detail};
use crate::transport::{invoke_op, quorum_round, respond_op, Response, Transport};
use crate::types::{
    BlockId, ConfigId, ConfigStatus, Configuration, TaggedValue,
};
use crate::wire::{Ballot, Envelope, Payload};

/// Retry spacing for contended consensus rounds.
const BACKOFF_BASE_NS: u64 = 5_000_000;
const BACKOFF_JITTER_NS: u64 = 250_000;

/// Client caches keyed by (object, configuration); never shared across
/// configurations.
pub type CacheMap = BTreeMap<(BlockId, ConfigId), DapCache>;

// ---------------------------------------------------------------------------
// Local configuration sequences
// ---------------------------------------------------------------------------

/// A client's view of one object's configuration sequence. Slot 0 is always
/// the finalized initial configuration; statuses only ever upgrade.
#[derive(Clone, Debug)]
pub struct LocalCseq {
    entries: Vec<(Configuration, ConfigStatus)>,
}

impl LocalCseq {
    pub fn initial(c0: Configuration) -> Self {
        LocalCseq {
            entries: vec![(c0, ConfigStatus::F)],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false // slot 0 always present
    }

    pub fn get(&self, i: usize) -> &(Configuration, ConfigStatus) {
        &self.entries[i]
    }

    pub fn last(&self) -> &(Configuration, ConfigStatus) {
        self.entries.last().expect("slot 0 always present")
    }

    pub fn last_index(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn last_finalized_index(&self) -> usize {
        self.entries
            .iter()
            .rposition(|(_, s)| *s == ConfigStatus::F)
            .expect("slot 0 is finalized")
    }

    /// Merges a discovered entry at `index`. Returns false on a conflicting
    /// configuration id, which indicates a consensus breach.
    #[must_use]
    pub fn merge(&mut self, index: usize, cfg: Configuration, status: ConfigStatus) -> bool {
        if index == self.entries.len() {
            self.entries.push((cfg, status));
            true
        } else if index < self.entries.len() {
            let slot = &mut self.entries[index];
            if slot.0.id != cfg.id {
                return false;
            }
            slot.1 = slot.1.max(status);
            true
        } else {
            false // gap; traversal never skips slots
        }
    }

    pub fn snapshot(&self) -> Vec<(u64, String)> {
        self.entries
            .iter()
            .map(|(c, s)| {
                (
                    c.id.0,
                    match s {
                        ConfigStatus::P => "P".to_string(),
                        ConfigStatus::F => "F".to_string(),
                    },
                )
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Sequence traversal
// ---------------------------------------------------------------------------

struct NextAcc {
    replies: usize,
    next: Option<(ConfigId, ConfigStatus)>,
    conflict: Option<(ConfigId, ConfigId)>,
}

/// Extends `cseq` with every configuration discoverable from its last
/// finalized slot. On return, a quorum of the frontier configuration
/// reported no successor.
pub async fn read_config<T: Transport>(t: &T, object: BlockId, cseq: &mut LocalCseq) {
    let uuid = invoke_op(t, ops::READ_CONFIG, Some(object), None, None);
    let mut i = cseq.last_finalized_index();
    loop {
        let cfg = cseq.get(i).0.clone();
        let quorum = cfg.quorum_size();
        let mut acc = NextAcc {
            replies: 0,
            next: None,
            conflict: None,
        };
        quorum_round(
            t,
            cfg.id,
            object,
            &cfg.servers,
            |_| Payload::ReadNext,
            &mut acc,
            |acc, env| {
                if let Payload::NextReply { next } = env.payload {
                    acc.replies += 1;
                    if let Some((cid, status)) = next {
                        match acc.next {
                            None => acc.next = Some((cid, status)),
                            Some((held, ref mut st)) if held == cid => *st = (*st).max(status),
                            Some((held, _)) => acc.conflict = Some((held, cid)),
                        }
                    }
                }
                acc.replies >= quorum
            },
        )
        .await;
        if let Some((a, b)) = acc.conflict {
            t.fault(format!(
                "successor cells of {} disagree: {a} vs {b}",
                cfg.id
            ));
        }
        if let Some((cid, status)) = acc.next {
            let next_cfg = t.lookup_config(cid);
            if !cseq.merge(i + 1, next_cfg, status) {
                t.fault(format!(
                    "configuration sequence of {object} conflicts at slot {}",
                    i + 1
                ));
            }
            i += 1;
        } else if i < cseq.last_index() {
            // This quorum lagged behind local knowledge; keep walking.
            i += 1;
        } else {
            break;
        }
    }
    respond_op(
        t,
        ops::READ_CONFIG,
        uuid,
        Response {
            block: Some(object),
            detail: Some(Detail {
                cseq: Some(cseq.snapshot()),
                ..Detail::default()
            }),
            ..Response::default()
        },
    );
}

// ---------------------------------------------------------------------------
// Consensus (proposer side)
// ---------------------------------------------------------------------------

struct Phase1 {
    replies: usize,
    grants: usize,
    best_accepted: Option<(Ballot, ConfigId)>,
    max_seen: u32,
}

struct Phase2 {
    replies: usize,
    grants: usize,
}

/// Single-decree proposer over the configuration's servers: decides which
/// configuration follows `cfg` for `object`. Returns the decided value,
/// which may be another proposer's.
pub async fn propose<T: Transport>(
    t: &T,
    cfg: &Configuration,
    object: BlockId,
    proposal: ConfigId,
) -> ConfigId {
    let n = cfg.n();
    let majority = n / 2 + 1;
    let mut counter = 1u32;
    loop {
        let ballot = Ballot {
            counter,
            node: t.node(),
        };
        let mut p1 = Phase1 {
            replies: 0,
            grants: 0,
            best_accepted: None,
            max_seen: counter,
        };
        quorum_round(
            t,
            cfg.id,
            object,
            &cfg.servers,
            |_| Payload::Prepare { ballot },
            &mut p1,
            |p1, env| {
                if let Payload::Promise {
                    granted,
                    promised,
                    accepted,
                } = env.payload
                {
                    p1.replies += 1;
                    p1.max_seen = p1.max_seen.max(promised.counter);
                    if granted {
                        p1.grants += 1;
                        if let Some((b, v)) = accepted {
                            if p1.best_accepted.map_or(true, |(ob, _)| b > ob) {
                                p1.best_accepted = Some((b, v));
                            }
                        }
                    }
                }
                // Done on a granted majority, or once one is unreachable.
                p1.grants >= majority || p1.replies - p1.grants > n - majority
            },
        )
        .await;
        if p1.grants < majority {
            backoff(t, p1.max_seen, &mut counter).await;
            continue;
        }
        let value = p1.best_accepted.map(|(_, v)| v).unwrap_or(proposal);

        let mut p2 = Phase2 {
            replies: 0,
            grants: 0,
        };
        quorum_round(
            t,
            cfg.id,
            object,
            &cfg.servers,
            |_| Payload::Accept { ballot, value },
            &mut p2,
            |p2, env| {
                if let Payload::Accepted { granted } = env.payload {
                    p2.replies += 1;
                    if granted {
                        p2.grants += 1;
                    }
                }
                p2.grants >= majority || p2.replies - p2.grants > n - majority
            },
        )
        .await;
        if p2.grants >= majority {
            return value;
        }
        backoff(t, p1.max_seen, &mut counter).await;
    }
}

async fn backoff<T: Transport>(t: &T, max_seen: u32, counter: &mut u32) {
    *counter = max_seen.max(*counter) + 1;
    let jitter = (t.node() as u64 % 16) * BACKOFF_JITTER_NS;
    t.sleep(BACKOFF_BASE_NS * (*counter as u64) + jitter).await;
}

// ---------------------------------------------------------------------------
// Reconfiguration
// ---------------------------------------------------------------------------

async fn write_next<T: Transport>(
    t: &T,
    cfg: &Configuration,
    object: BlockId,
    target: ConfigId,
    status: ConfigStatus,
) {
    let quorum = cfg.quorum_size();
    let mut acks = 0usize;
    quorum_round(
        t,
        cfg.id,
        object,
        &cfg.servers,
        |_| Payload::WriteNext {
            config: target,
            status,
        },
        &mut acks,
        |acks, env| {
            if matches!(env.payload, Payload::WriteNextAck) {
                *acks += 1;
            }
            *acks >= quorum
        },
    )
    .await;
}

/// Gathers the maximum tag-value pair from every configuration between the
/// last finalized slot and the frontier, and installs it into the frontier
/// configuration, re-encoding across DAP kinds as needed.
pub async fn update_config<T: Transport>(
    t: &T,
    object: BlockId,
    cseq: &LocalCseq,
    caches: &mut CacheMap,
) -> TaggedValue {
    let uuid = invoke_op(t, ops::UPDATE_CONFIG, Some(object), None, None);
    let mu = cseq.last_finalized_index();
    let nu = cseq.last_index();
    let mut best = TaggedValue::initial();
    for i in mu..=nu {
        let cfg = cseq.get(i).0.clone();
        let cache = caches.entry((object, cfg.id)).or_default();
        let tv = dap::get_data(t, &cfg, object, cache).await;
        best = best.max_by_tag(tv);
    }
    let target = cseq.get(nu).0.clone();
    let cache = caches.entry((object, target.id)).or_default();
    dap::put_data(t, &target, object, cache, &best).await;
    respond_op(
        t,
        ops::UPDATE_CONFIG,
        uuid,
        Response {
            block: Some(object),
            config: Some(target.id),
            tag: Some(best.tag),
            ..Response::default()
        },
    );
    best
}

/// The full reconfiguration operation: traverse, decide, migrate, finalize.
/// The decided configuration may differ from `new_config`; the caller's
/// sequence ends with the decided one, finalized.
pub async fn recon<T: Transport>(
    t: &T,
    object: BlockId,
    cseq: &mut LocalCseq,
    caches: &mut CacheMap,
    new_config: Configuration,
) {
    t.register_config(new_config.clone());
    let uuid = invoke_op(t, ops::RECON, Some(object), Some(new_config.id), None);

    read_config(t, object, cseq).await;

    let pred_index = cseq.last_index();
    let pred = cseq.get(pred_index).0.clone();
    let decided = propose(t, &pred, object, new_config.id).await;
    write_next(t, &pred, object, decided, ConfigStatus::P).await;
    let decided_cfg = t.lookup_config(decided);
    if !cseq.merge(pred_index + 1, decided_cfg, ConfigStatus::P) {
        t.fault(format!(
            "configuration sequence of {object} conflicts at slot {}",
            pred_index + 1
        ));
    }

    let moved = update_config(t, object, cseq, caches).await;

    write_next(t, &pred, object, decided, ConfigStatus::F).await;
    let decided_cfg = t.lookup_config(decided);
    let _ = cseq.merge(pred_index + 1, decided_cfg, ConfigStatus::F);

    respond_op(
        t,
        ops::RECON,
        uuid,
        Response {
            block: Some(object),
            config: Some(decided),
            tag: Some(moved.tag),
            detail: Some(Detail {
                cseq: Some(cseq.snapshot()),
                ..Detail::default()
            }),
            ..Response::default()
        },
    );
}
