//! Deterministic discrete-event simulator.
//!
//! A single-threaded event loop drives server state machines and client
//! programs. Clients are async tasks polled only from the loop: a task is
//! resumed when a message lands in its inbox or a timer it armed fires, so
//! the complete run is a pure function of (seed, topology, workload).
//! Channels are reliable and FIFO per sender-receiver pair; asynchrony comes
//! from link delays plus a per-byte cost that makes payload sizes visible as
//! latency.

pub mod workload;

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, RawWaker, RawWakerVTable, Waker};

use crate::history::{Detail, EventKind, HistoryLog, HistoryRecord};
use crate::server::ReplicaServer;
use crate::transport::{OpScope, Transport};
use crate::types::{ConfigId, Configuration, Mutation, NodeId};
use crate::wire::{op_uuid, Envelope, OpUuid};

// ---------------------------------------------------------------------------
// Seeded RNG
// ---------------------------------------------------------------------------

/// SplitMix64. Small, portable and stable across toolchains, which keeps
/// identical seeds producing identical traces indefinitely.
#[derive(Clone, Debug)]
pub struct SimRng {
    state: u64,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[lo, hi]`, inclusive on both ends.
    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        lo + self.next_u64() % (hi - lo + 1)
    }

    pub fn pick<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.range(0, xs.len() as u64 - 1) as usize]
    }

    pub fn fill_bytes(&mut self, out: &mut [u8]) {
        for chunk in out.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

// ---------------------------------------------------------------------------
// Simulation parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub enum DelayModel {
    Fixed(u64),
    Uniform { lo: u64, hi: u64 },
}

impl DelayModel {
    fn sample(&self, rng: &mut SimRng) -> u64 {
        match self {
            DelayModel::Fixed(d) => *d,
            DelayModel::Uniform { lo, hi } => rng.range(*lo, *hi),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    pub delay: DelayModel,
    /// Nanoseconds of added latency per wire byte.
    pub byte_cost_ns: u64,
    /// (virtual time, server) pairs; at each time the server crash-stops.
    pub crash_schedule: Vec<(u64, NodeId)>,
    /// Runs stop once virtual time passes this point; pending operations are
    /// reported as stalls.
    pub horizon_ns: u64,
    pub mutation: Option<Mutation>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            delay: DelayModel::Fixed(500_000), // 0.5 ms
            byte_cost_ns: 1,                   // ~1 GB/s links
            crash_schedule: Vec::new(),
            horizon_ns: 600_000_000_000, // 10 virtual minutes
            mutation: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

type TaskId = usize;

#[derive(Debug)]
enum SimEvent {
    Deliver(Envelope),
    TimerFire { task: TaskId },
    Crash { server: NodeId },
    Start { task: TaskId },
}

struct Scheduled {
    time: u64,
    seq: u64,
    event: SimEvent,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

// ---------------------------------------------------------------------------
// Shared state
// ---------------------------------------------------------------------------

pub struct SimShared {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    rng: SimRng,
    delay: DelayModel,
    byte_cost: u64,
    mutation: Option<Mutation>,
    inboxes: BTreeMap<NodeId, VecDeque<Envelope>>,
    names: BTreeMap<NodeId, String>,
    registry: BTreeMap<ConfigId, Configuration>,
    crashed: BTreeSet<NodeId>,
    /// Enforces FIFO per (from, to) pair under randomized delays.
    last_delivery: BTreeMap<(NodeId, NodeId), u64>,
    scopes: BTreeMap<NodeId, Vec<OpScope>>,
    uuid_counters: BTreeMap<NodeId, u32>,
    current_task: Option<TaskId>,
    log: HistoryLog,
    fault: Option<String>,
}

impl SimShared {
    fn name_of(&self, node: NodeId) -> String {
        self.names
            .get(&node)
            .cloned()
            .unwrap_or_else(|| format!("n{node}"))
    }

    fn schedule(&mut self, time: u64, event: SimEvent) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { time, seq, event }));
    }

    /// Queues a message: logs the send, prices the link and keeps per-pair
    /// delivery order. Messages to crashed nodes still cost their bytes but
    /// are dropped at dispatch.
    fn send_envelope(&mut self, env: Envelope) {
        let bytes = env.wire_len() as u64;
        let parent = self
            .scopes
            .get(&env.from)
            .and_then(|s| s.first())
            .map(|s| s.uuid);
        let mut rec = HistoryRecord::new(self.now, self.name_of(env.from), EventKind::Send);
        rec.op = Some(env.payload.verb_name().to_string());
        rec.bytes = Some(bytes);
        rec.uuid = Some(env.op);
        if let Some(parent) = parent {
            rec.detail = Some(Detail {
                parent: Some(parent),
                ..Detail::default()
            });
        }
        self.log.push(rec);

        let latency = self.delay.sample(&mut self.rng) + self.byte_cost * bytes;
        let pair = (env.from, env.to);
        let at = (self.now + latency).max(*self.last_delivery.get(&pair).unwrap_or(&0));
        self.last_delivery.insert(pair, at);
        self.schedule(at, SimEvent::Deliver(env));
    }

    fn log_recv(&mut self, env: &Envelope) {
        let mut rec = HistoryRecord::new(self.now, self.name_of(env.to), EventKind::Recv);
        rec.op = Some(env.payload.verb_name().to_string());
        rec.bytes = Some(env.wire_len() as u64);
        rec.uuid = Some(env.op);
        self.log.push(rec);
    }
}

// ---------------------------------------------------------------------------
// Client-side transport handle
// ---------------------------------------------------------------------------

/// One client's view of the simulator; implements [`Transport`].
#[derive(Clone)]
pub struct SimCtx {
    shared: Rc<RefCell<SimShared>>,
    node: NodeId,
}

struct RecvFuture {
    shared: Rc<RefCell<SimShared>>,
    node: NodeId,
}

impl Future for RecvFuture {
    type Output = Envelope;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Envelope> {
        let mut shared = self.shared.borrow_mut();
        match shared.inboxes.entry(self.node).or_default().pop_front() {
            Some(env) => Poll::Ready(env),
            None => Poll::Pending,
        }
    }
}

struct SleepFuture {
    shared: Rc<RefCell<SimShared>>,
    deadline: u64,
    armed: bool,
}

impl Future for SleepFuture {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        let mut shared = self.shared.borrow_mut();
        if shared.now >= self.deadline {
            return Poll::Ready(());
        }
        if !self.armed {
            let task = shared.current_task.expect("sleep polled outside a task");
            let deadline = self.deadline;
            shared.schedule(deadline, SimEvent::TimerFire { task });
            drop(shared);
            self.armed = true;
        }
        Poll::Pending
    }
}

impl Transport for SimCtx {
    fn node(&self) -> NodeId {
        self.node
    }

    fn name(&self) -> String {
        self.shared.borrow().name_of(self.node)
    }

    fn now(&self) -> u64 {
        self.shared.borrow().now
    }

    fn send(&self, env: Envelope) {
        self.shared.borrow_mut().send_envelope(env);
    }

    async fn recv(&self) -> Envelope {
        RecvFuture {
            shared: self.shared.clone(),
            node: self.node,
        }
        .await
    }

    async fn sleep(&self, nanos: u64) {
        let deadline = self.now() + nanos;
        SleepFuture {
            shared: self.shared.clone(),
            deadline,
            armed: false,
        }
        .await
    }

    fn log(&self, rec: HistoryRecord) {
        self.shared.borrow_mut().log.push(rec);
    }

    fn lookup_config(&self, id: ConfigId) -> Configuration {
        self.shared
            .borrow()
            .registry
            .get(&id)
            .cloned()
            .unwrap_or_else(|| panic!("unknown configuration {id:?}"))
    }

    fn register_config(&self, cfg: Configuration) {
        self.shared.borrow_mut().registry.insert(cfg.id, cfg);
    }

    fn mutation(&self) -> Option<Mutation> {
        self.shared.borrow().mutation
    }

    fn fresh_uuid(&self) -> OpUuid {
        let mut shared = self.shared.borrow_mut();
        let ctr = shared.uuid_counters.entry(self.node).or_insert(0);
        *ctr += 1;
        op_uuid(self.node, *ctr)
    }

    fn fault(&self, info: String) {
        let mut shared = self.shared.borrow_mut();
        let name = shared.name_of(self.node);
        let mut rec = HistoryRecord::new(shared.now, name, EventKind::Fault);
        rec.detail = Some(Detail {
            info: Some(info.clone()),
            ..Detail::default()
        });
        shared.log.push(rec);
        shared.fault = Some(info);
    }

    fn push_scope(&self, scope: OpScope) {
        self.shared
            .borrow_mut()
            .scopes
            .entry(self.node)
            .or_default()
            .push(scope);
    }

    fn pop_scope(&self) -> Option<OpScope> {
        self.shared
            .borrow_mut()
            .scopes
            .entry(self.node)
            .or_default()
            .pop()
    }

    fn root_scope(&self) -> Option<OpScope> {
        self.shared
            .borrow()
            .scopes
            .get(&self.node)
            .and_then(|s| s.first().copied())
    }

    fn current_scope(&self) -> Option<OpScope> {
        self.shared
            .borrow()
            .scopes
            .get(&self.node)
            .and_then(|s| s.last().copied())
    }

    fn rand_u64(&self) -> u64 {
        self.shared.borrow_mut().rng.next_u64()
    }
}

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

/// An operation still in flight when the run ended.
#[derive(Clone, Debug)]
pub struct Stall {
    pub node: String,
    pub op: String,
}

#[derive(Debug)]
pub struct RunReport {
    pub log: HistoryLog,
    pub stalls: Vec<Stall>,
    pub fault: Option<String>,
    pub end_vtime: u64,
    pub hit_horizon: bool,
}

struct Task {
    node: NodeId,
    fut: Option<Pin<Box<dyn Future<Output = ()>>>>,
}

pub struct Simulator {
    shared: Rc<RefCell<SimShared>>,
    servers: BTreeMap<NodeId, ReplicaServer>,
    tasks: Vec<Task>,
    node_task: BTreeMap<NodeId, TaskId>,
    horizon: u64,
    hit_horizon: bool,
}

fn noop_waker() -> Waker {
    fn clone(_: *const ()) -> RawWaker {
        RawWaker::new(std::ptr::null(), &VTABLE)
    }
    fn no_op(_: *const ()) {}
    static VTABLE: RawWakerVTable = RawWakerVTable::new(clone, no_op, no_op, no_op);
    // Safety: the vtable functions are all no-ops over a null pointer.
    unsafe { Waker::from_raw(RawWaker::new(std::ptr::null(), &VTABLE)) }
}

impl Simulator {
    pub fn new(cfg: &SimConfig) -> Self {
        let shared = SimShared {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            rng: SimRng::new(cfg.seed),
            delay: cfg.delay,
            byte_cost: cfg.byte_cost_ns,
            mutation: cfg.mutation,
            inboxes: BTreeMap::new(),
            names: BTreeMap::new(),
            registry: BTreeMap::new(),
            crashed: BTreeSet::new(),
            last_delivery: BTreeMap::new(),
            scopes: BTreeMap::new(),
            uuid_counters: BTreeMap::new(),
            current_task: None,
            log: HistoryLog::default(),
            fault: None,
        };
        let sim = Simulator {
            shared: Rc::new(RefCell::new(shared)),
            servers: BTreeMap::new(),
            tasks: Vec::new(),
            node_task: BTreeMap::new(),
            horizon: cfg.horizon_ns,
            hit_horizon: false,
        };
        for &(time, server) in &cfg.crash_schedule {
            sim.shared
                .borrow_mut()
                .schedule(time, SimEvent::Crash { server });
        }
        sim
    }

    pub fn name_node(&self, node: NodeId, name: impl Into<String>) {
        self.shared.borrow_mut().names.insert(node, name.into());
    }

    pub fn add_server(&mut self, id: NodeId) {
        let mutation = self.shared.borrow().mutation;
        self.servers.insert(id, ReplicaServer::new(id, mutation));
    }

    pub fn register_config(&self, cfg: Configuration) {
        self.shared.borrow_mut().registry.insert(cfg.id, cfg);
    }

    /// Schedules an additional crash while the run is in progress.
    pub fn inject_crash(&self, at: u64, server: NodeId) {
        self.shared
            .borrow_mut()
            .schedule(at, SimEvent::Crash { server });
    }

    pub fn ctx(&self, node: NodeId) -> SimCtx {
        SimCtx {
            shared: self.shared.clone(),
            node,
        }
    }

    pub fn now(&self) -> u64 {
        self.shared.borrow().now
    }

    /// Spawns a client program starting at virtual time `start`. One live
    /// task per node.
    pub fn spawn<F>(&mut self, node: NodeId, start: u64, fut: F)
    where
        F: Future<Output = ()> + 'static,
    {
        assert!(
            !self.node_task.contains_key(&node),
            "node {node} already runs a task"
        );
        let id = self.tasks.len();
        self.tasks.push(Task {
            node,
            fut: Some(Box::pin(fut)),
        });
        self.node_task.insert(node, id);
        let at = self.shared.borrow().now.max(start);
        self.shared.borrow_mut().schedule(at, SimEvent::Start { task: id });
    }

    fn poll_task(&mut self, id: TaskId) {
        let Some(mut fut) = self.tasks[id].fut.take() else {
            return;
        };
        self.shared.borrow_mut().current_task = Some(id);
        let waker = noop_waker();
        let mut cx = Context::from_waker(&waker);
        match fut.as_mut().poll(&mut cx) {
            Poll::Ready(()) => {
                self.node_task.remove(&self.tasks[id].node);
            }
            Poll::Pending => {
                self.tasks[id].fut = Some(fut);
            }
        }
        self.shared.borrow_mut().current_task = None;
    }

    /// Runs events until the queue empties, a fault aborts the run, or the
    /// horizon passes.
    pub fn drain(&mut self) {
        loop {
            if self.shared.borrow().fault.is_some() {
                return;
            }
            let next = {
                let mut shared = self.shared.borrow_mut();
                match shared.queue.pop() {
                    Some(Reverse(ev)) => {
                        if ev.time > self.horizon {
                            self.hit_horizon = true;
                            return;
                        }
                        shared.now = ev.time;
                        ev.event
                    }
                    None => return,
                }
            };
            match next {
                SimEvent::Start { task } | SimEvent::TimerFire { task } => self.poll_task(task),
                SimEvent::Crash { server } => {
                    {
                        let mut shared = self.shared.borrow_mut();
                        if !shared.crashed.insert(server) {
                            continue;
                        }
                        let rec = HistoryRecord::new(
                            shared.now,
                            shared.name_of(server),
                            EventKind::Crash,
                        );
                        shared.log.push(rec);
                    }
                    self.servers.remove(&server);
                }
                SimEvent::Deliver(env) => self.deliver(env),
            }
        }
    }

    fn deliver(&mut self, env: Envelope) {
        let to = env.to;
        if self.shared.borrow().crashed.contains(&to) {
            return;
        }
        if let Some(server) = self.servers.get_mut(&to) {
            let cfg = {
                let mut shared = self.shared.borrow_mut();
                shared.log_recv(&env);
                shared.registry.get(&env.config).cloned()
            };
            let Some(cfg) = cfg else {
                // Unknown configuration: drop; clients only address members
                // of registered configurations.
                return;
            };
            match server.handle(&env, &cfg) {
                Ok(replies) => {
                    let mut shared = self.shared.borrow_mut();
                    for reply in replies {
                        shared.send_envelope(reply);
                    }
                }
                Err(fault) => {
                    let mut shared = self.shared.borrow_mut();
                    let mut rec =
                        HistoryRecord::new(shared.now, shared.name_of(to), EventKind::Fault);
                    rec.detail = Some(Detail {
                        info: Some(fault.to_string()),
                        ..Detail::default()
                    });
                    shared.log.push(rec);
                    shared.fault = Some(fault.to_string());
                }
            }
        } else {
            {
                let mut shared = self.shared.borrow_mut();
                shared.log_recv(&env);
                shared.inboxes.entry(to).or_default().push_back(env);
            }
            if let Some(&task) = self.node_task.get(&to) {
                self.poll_task(task);
            }
        }
    }

    /// Ends the run and reports the history plus any operations that never
    /// responded.
    pub fn finish(mut self) -> RunReport {
        // Drop tasks first; stalled futures own context handles.
        self.tasks.clear();
        let mut shared = self.shared.borrow_mut();
        let mut stalls = Vec::new();
        for (node, scopes) in &shared.scopes {
            if let Some(root) = scopes.first() {
                stalls.push(Stall {
                    node: shared
                        .names
                        .get(node)
                        .cloned()
                        .unwrap_or_else(|| format!("n{node}")),
                    op: root.kind.to_string(),
                });
            }
        }
        RunReport {
            log: std::mem::take(&mut shared.log),
            stalls,
            fault: shared.fault.take(),
            end_vtime: shared.now,
            hit_horizon: self.hit_horizon,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BlockId, DapKind, Tag};
    use crate::wire::Payload;

    #[test]
    fn rng_is_deterministic() {
        let mut a = SimRng::new(7);
        let mut b = SimRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SimRng::new(8);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn rng_range_is_inclusive() {
        let mut r = SimRng::new(3);
        let mut seen = [false; 3];
        for _ in 0..200 {
            seen[r.range(1, 3) as usize - 1] = true;
        }
        assert_eq!(seen, [true, true, true]);
    }

    #[test]
    fn empty_workload_empty_history() {
        let sim = Simulator::new(&SimConfig::default());
        let report = {
            let mut sim = sim;
            sim.drain();
            sim.finish()
        };
        assert!(report.log.records.is_empty());
        assert!(report.stalls.is_empty());
    }

    #[test]
    fn fifo_per_pair_under_random_delays() {
        // Two messages along the same link keep their send order even when
        // the second samples a smaller delay.
        let cfg = SimConfig {
            seed: 11,
            delay: DelayModel::Uniform {
                lo: 1_000,
                hi: 1_000_000,
            },
            byte_cost_ns: 0,
            ..SimConfig::default()
        };
        let mut sim = Simulator::new(&cfg);
        let config =
            Configuration::new(ConfigId(0), vec![1], DapKind::Abd, 1, 1).unwrap();
        sim.register_config(config);
        sim.add_server(1);
        let ctx = sim.ctx(100);
        for i in 0..20u32 {
            ctx.send(Envelope {
                from: 100,
                to: 1,
                config: ConfigId(0),
                object: BlockId::genesis(1),
                op: i as u64,
                payload: Payload::QueryTag,
            });
        }
        sim.drain();
        let report = sim.finish();
        let recv_uuids: Vec<u64> = report
            .log
            .records
            .iter()
            .filter(|r| r.event == EventKind::Recv && r.node == "n1")
            .map(|r| r.uuid.unwrap())
            .collect();
        assert_eq!(recv_uuids, (0..20u64).collect::<Vec<_>>());
    }

    #[test]
    fn quorum_round_completes_against_servers() {
        let mut sim = Simulator::new(&SimConfig::default());
        let config =
            Configuration::new(ConfigId(0), vec![1, 2, 3], DapKind::Abd, 1, 1).unwrap();
        sim.register_config(config.clone());
        for s in [1, 2, 3] {
            sim.add_server(s);
        }
        let ctx = sim.ctx(100);
        let out: Rc<RefCell<Option<Tag>>> = Rc::new(RefCell::new(None));
        let out2 = out.clone();
        sim.spawn(100, 0, async move {
            let mut best: (usize, Tag) = (0, Tag::ZERO);
            crate::transport::quorum_round(
                &ctx,
                ConfigId(0),
                BlockId::genesis(1),
                &[1, 2, 3],
                |_| Payload::QueryTag,
                &mut best,
                |best, env| {
                    if let Payload::TagReply { tag } = env.payload {
                        best.0 += 1;
                        best.1 = best.1.max(tag);
                    }
                    best.0 >= 2
                },
            )
            .await;
            *out2.borrow_mut() = Some(best.1);
        });
        sim.drain();
        let report = sim.finish();
        assert_eq!(*out.borrow(), Some(Tag::ZERO));
        assert!(report.stalls.is_empty());
        // Virtual time advanced by one round trip.
        assert!(report.end_vtime >= 1_000_000);
    }

    #[test]
    fn crashed_servers_do_not_reply() {
        let mut sim = Simulator::new(&SimConfig {
            crash_schedule: vec![(0, 2), (0, 3)],
            ..SimConfig::default()
        });
        let config =
            Configuration::new(ConfigId(0), vec![1, 2, 3], DapKind::Abd, 1, 1).unwrap();
        sim.register_config(config);
        for s in [1, 2, 3] {
            sim.add_server(s);
        }
        let ctx = sim.ctx(100);
        sim.spawn(100, 1, async move {
            crate::transport::invoke_op(&ctx, "probe", None, None, None);
            let mut count = 0usize;
            crate::transport::quorum_round(
                &ctx,
                ConfigId(0),
                BlockId::genesis(1),
                &[1, 2, 3],
                |_| Payload::QueryTag,
                &mut count,
                |count, _| {
                    *count += 1;
                    *count >= 2 // majority unreachable: 2 of 3 crashed
                },
            )
            .await;
            unreachable!("quorum cannot form");
        });
        sim.drain();
        let report = sim.finish();
        assert_eq!(report.stalls.len(), 1);
        assert_eq!(report.stalls[0].op, "probe");
    }
}
