//! Exhaustive exploration of delivery interleavings and crash placements
//! for small instances.
//!
//! The search is depth-first. At every state the enabled actions are, in
//! order: invoking the next operation of each idle live process, then
//! delivering each distinct in-flight message. When a process allowed to
//! crash broadcasts, the search also branches on crashing it part-way
//! through that broadcast with every subset of receivers.
//!
//! States are keyed by the replicas, crash flags, the in-flight multiset,
//! per-process progress and an abstraction of the history so far (each
//! operation's result and which operations had completed when it started).
//! Two paths reaching the same key produce the same histories from there
//! on, so each distinct terminal state is reported once with the trace of
//! the first path that reached it. Trace time is the step count.
//!
//! A delivery that leaves its receiver unchanged and sends nothing is taken
//! on its own, without trying the alternatives. The handler guards only
//! ever grow (sequence numbers, forwarded sets, the synchronized write
//! number), so such a message stays inert and commutes with every other
//! action.

use std::collections::HashSet;
use std::hash::Hash;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::Xxh3;

use crate::abd::AbdReplicaState;
use crate::message::Message;
use crate::protocol::{
    Cluster, Completion, Dest, Output, ProtocolError, Replica, ReplicaState, TeffOptions,
};
use crate::sim::config::{Algorithm, OpCall};
use crate::sim::network::deliver_semantics;
use crate::sim::trace::{EventKind, OpResult, Trace, TraceEvent};
use crate::types::{OpId, ProcessId, RegValue, Tick};

pub const DEFAULT_MAX_STATES: usize = 20_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedOp {
    pub process: ProcessId,
    #[serde(flatten)]
    pub call: OpCall,
}

impl PlannedOp {
    pub fn write(process: ProcessId, value: impl Into<RegValue>) -> Self {
        PlannedOp {
            process,
            call: OpCall::Write {
                value: value.into(),
            },
        }
    }

    pub fn read(process: ProcessId) -> Self {
        PlannedOp {
            process,
            call: OpCall::Read,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreSpec {
    pub n: usize,
    pub t: usize,
    pub algorithm: Algorithm,
    pub writer: ProcessId,
    /// Each process runs its operations in list order, one at a time.
    pub ops: Vec<PlannedOp>,
    /// Processes that may crash, at most `t` of them in one execution.
    pub crashable: Vec<ProcessId>,
    pub options: TeffOptions,
}

impl ExploreSpec {
    pub fn new(n: usize, t: usize, algorithm: Algorithm, ops: Vec<PlannedOp>) -> Self {
        ExploreSpec {
            n,
            t,
            algorithm,
            writer: ProcessId(1),
            ops,
            crashable: Vec::new(),
            options: TeffOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreStats {
    pub states: usize,
    pub terminals: usize,
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error(transparent)]
    Model(#[from] ProtocolError),
    #[error("op {op}: {source}")]
    Protocol { op: OpId, source: ProtocolError },
    #[error("at most 64 operations can be explored (got {0})")]
    TooManyOps(usize),
    #[error(
        "state bound of {max_states} exceeded after {states} states and {terminals} terminal traces"
    )]
    BoundExceeded {
        max_states: usize,
        states: usize,
        terminals: usize,
    },
}

/// Explores `spec`, calling `visit` on one trace per distinct terminal state.
pub fn explore_with<F: FnMut(&Trace)>(
    spec: &ExploreSpec,
    max_states: usize,
    mut visit: F,
) -> Result<ExploreStats, ExploreError> {
    explore_dyn(spec, max_states, &mut visit)
}

fn explore_dyn(
    spec: &ExploreSpec,
    max_states: usize,
    visit: &mut dyn FnMut(&Trace),
) -> Result<ExploreStats, ExploreError> {
    if spec.ops.len() > 64 {
        return Err(ExploreError::TooManyOps(spec.ops.len()));
    }
    let cluster = Cluster::new(spec.n, spec.t, spec.writer)?;
    for op in &spec.ops {
        cluster.check_member(op.process)?;
    }
    for p in &spec.crashable {
        cluster.check_member(*p)?;
    }
    match spec.algorithm.variant() {
        Some(variant) => {
            let replicas = ProcessId::all(spec.n)
                .map(|p| ReplicaState::new(p, cluster, variant, spec.options, RegValue::Bottom))
                .collect::<Result<Vec<_>, _>>()?;
            Explorer::new(spec, max_states, visit).run(replicas)
        }
        None => {
            let replicas = ProcessId::all(spec.n)
                .map(|p| AbdReplicaState::new(p, cluster, RegValue::Bottom))
                .collect::<Result<Vec<_>, _>>()?;
            Explorer::new(spec, max_states, visit).run(replicas)
        }
    }
}

/// Explores `spec` and collects the representative traces.
pub fn explore(spec: &ExploreSpec, max_states: usize) -> Result<Vec<Trace>, ExploreError> {
    let mut traces = Vec::new();
    explore_with(spec, max_states, |t| traces.push(t.clone()))?;
    Ok(traces)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum OpStatus {
    NotStarted,
    /// `before`: mask of operations complete at invocation.
    Pending {
        before: u64,
    },
    Done {
        before: u64,
        result: OpResult,
    },
}

#[derive(Clone, Debug)]
struct Node<R> {
    replicas: Vec<Rc<R>>,
    crashed: Vec<bool>,
    crashes_left: usize,
    /// Sorted, so equal multisets compare equal.
    in_flight: Vec<(ProcessId, ProcessId, Message)>,
    next: Vec<usize>,
    running: Vec<Option<OpId>>,
    status: Vec<OpStatus>,
    done: u64,
    path: Path,
    time: Tick,
}

/// The events leading to a node, newest first, shared between siblings.
type Path = Option<Rc<Link>>;

#[derive(Debug)]
struct Link {
    event: TraceEvent,
    prev: Path,
}

fn unwind(mut path: &Path) -> Trace {
    let mut events = Vec::new();
    while let Some(step) = path {
        events.push(step.event.clone());
        path = &step.prev;
    }
    events.reverse();
    Trace { events }
}

impl<R: Replica> Node<R> {
    fn fingerprint(&self) -> u128 {
        let mut h = Xxh3::new();
        self.replicas.hash(&mut h);
        self.crashed.hash(&mut h);
        self.crashes_left.hash(&mut h);
        self.in_flight.hash(&mut h);
        self.next.hash(&mut h);
        self.running.hash(&mut h);
        self.status.hash(&mut h);
        h.digest128()
    }

    fn record(&mut self, process: ProcessId, kind: EventKind) {
        let event = TraceEvent {
            time: self.time,
            process: Some(process),
            kind,
        };
        self.path = Some(Rc::new(Link {
            event,
            prev: self.path.take(),
        }));
    }
}

enum Action {
    Invoke(OpId),
    Deliver(usize),
}

/// An action with a delivery's effect already computed.
enum Step<R> {
    Invoke(OpId),
    Deliver(usize, Rc<R>, Output),
}

struct Explorer<'a> {
    spec: &'a ExploreSpec,
    /// Per process, its operation ids in order.
    queues: Vec<Vec<OpId>>,
    max_states: usize,
    seen: HashSet<u128>,
    terminals: usize,
    visit: &'a mut dyn FnMut(&Trace),
}

impl<'a> Explorer<'a> {
    fn new(spec: &'a ExploreSpec, max_states: usize, visit: &'a mut dyn FnMut(&Trace)) -> Self {
        let mut queues = vec![Vec::new(); spec.n];
        for (i, op) in spec.ops.iter().enumerate() {
            queues[op.process.index()].push(i);
        }
        Explorer {
            spec,
            queues,
            max_states,
            seen: HashSet::new(),
            terminals: 0,
            visit,
        }
    }

    fn run<R: Replica>(mut self, replicas: Vec<R>) -> Result<ExploreStats, ExploreError> {
        let n = self.spec.n;
        let root = Node {
            replicas: replicas.into_iter().map(Rc::new).collect(),
            crashed: vec![false; n],
            crashes_left: self.spec.t.min(self.spec.crashable.len()),
            in_flight: Vec::new(),
            next: vec![0; n],
            running: vec![None; n],
            status: vec![OpStatus::NotStarted; self.spec.ops.len()],
            done: 0,
            path: None,
            time: 0,
        };
        self.dfs(root)?;
        Ok(ExploreStats {
            states: self.seen.len(),
            terminals: self.terminals,
        })
    }

    fn dfs<R: Replica>(&mut self, node: Node<R>) -> Result<(), ExploreError> {
        if !self.seen.insert(node.fingerprint()) {
            return Ok(());
        }
        if self.seen.len() > self.max_states {
            return Err(ExploreError::BoundExceeded {
                max_states: self.max_states,
                states: self.seen.len(),
                terminals: self.terminals,
            });
        }
        let actions = self.actions(&node);
        if actions.is_empty() {
            self.terminals += 1;
            (self.visit)(&unwind(&node.path));
            return Ok(());
        }
        let mut steps = Vec::with_capacity(actions.len());
        for action in actions {
            let step = match action {
                Action::Invoke(op) => Step::Invoke(op),
                Action::Deliver(i) => {
                    let (from, to, msg) = &node.in_flight[i];
                    let before = &node.replicas[to.index()];
                    let mut replica = R::clone(before);
                    let out = replica.on_message(*from, msg);
                    let inert =
                        out.outgoing.is_empty() && out.completion.is_none() && replica == **before;
                    if inert {
                        steps.clear();
                        steps.push(Step::Deliver(i, Rc::new(replica), out));
                        break;
                    }
                    Step::Deliver(i, Rc::new(replica), out)
                }
            };
            steps.push(step);
        }
        for step in steps {
            for child in self.successors(&node, step)? {
                self.dfs(child)?;
            }
        }
        Ok(())
    }

    fn actions<R: Replica>(&self, node: &Node<R>) -> Vec<Action> {
        let mut actions = Vec::new();
        for (i, queue) in self.queues.iter().enumerate() {
            if !node.crashed[i] && node.running[i].is_none() {
                if let Some(&op) = queue.get(node.next[i]) {
                    actions.push(Action::Invoke(op));
                }
            }
        }
        for i in 0..node.in_flight.len() {
            if i == 0 || node.in_flight[i] != node.in_flight[i - 1] {
                actions.push(Action::Deliver(i));
            }
        }
        actions
    }

    fn successors<R: Replica>(
        &self,
        node: &Node<R>,
        step: Step<R>,
    ) -> Result<Vec<Node<R>>, ExploreError> {
        let mut base = node.clone();
        let (p, out) = match step {
            Step::Invoke(op) => {
                let spec = &self.spec.ops[op];
                let p = spec.process;
                base.next[p.index()] += 1;
                let replica = Rc::make_mut(&mut base.replicas[p.index()]);
                let out = match &spec.call {
                    OpCall::Write { value } => replica.begin_write(value.clone()),
                    OpCall::Read => replica.begin_read(),
                }
                .map_err(|source| ExploreError::Protocol { op, source })?;
                let sn = spec.call.is_write().then(|| replica.local_wsn());
                let tag = replica.op_tag();
                base.running[p.index()] = Some(op);
                base.status[op] = OpStatus::Pending { before: base.done };
                base.record(
                    p,
                    EventKind::Invoke {
                        op,
                        call: spec.call.clone(),
                        sn,
                        tag,
                    },
                );
                (p, out)
            }
            Step::Deliver(i, replica, out) => {
                let (from, to, msg) = base.in_flight.remove(i);
                base.record(to, EventKind::Deliver { from, msg });
                base.replicas[to.index()] = replica;
                (to, out)
            }
        };

        let broadcasts = out
            .outgoing
            .iter()
            .filter(|o| o.dest == Dest::Broadcast)
            .count();
        let mut cuts: Vec<Option<(usize, Vec<ProcessId>)>> = Vec::new();
        if base.crashes_left > 0 && self.spec.crashable.contains(&p) {
            for b in 0..broadcasts {
                for mask in 0u32..(1 << self.spec.n) {
                    let subset = ProcessId::all(self.spec.n)
                        .filter(|q| mask & (1 << q.index()) != 0)
                        .collect();
                    cuts.push(Some((b, subset)));
                }
            }
        }
        let finish = |mut child: Node<R>, cut| {
            self.apply(&mut child, p, &out, cut);
            child.in_flight.sort();
            child.time += 1;
            child
        };
        let mut children: Vec<Node<R>> = cuts
            .into_iter()
            .map(|cut| finish(base.clone(), cut))
            .collect();
        children.insert(0, finish(base, None));
        Ok(children)
    }

    fn apply<R: Replica>(
        &self,
        node: &mut Node<R>,
        p: ProcessId,
        out: &Output,
        cut: Option<(usize, Vec<ProcessId>)>,
    ) {
        let mut nth = 0;
        for o in &out.outgoing {
            match o.dest {
                Dest::To(q) => send(node, p, q, &o.msg),
                Dest::Broadcast => {
                    let subset = cut.as_ref().filter(|c| c.0 == nth).map(|c| c.1.as_slice());
                    nth += 1;
                    for q in deliver_semantics(self.spec.n, subset) {
                        send(node, p, q, &o.msg);
                    }
                    if subset.is_some() {
                        node.crashed[p.index()] = true;
                        node.crashes_left -= 1;
                        node.in_flight.retain(|(_, to, _)| *to != p);
                        node.record(p, EventKind::Crash);
                        return;
                    }
                }
            }
        }
        if let Some(c) = &out.completion {
            let op = node.running[p.index()]
                .take()
                .expect("completion without a running operation");
            let result = match c.clone() {
                Completion::WriteDone { wsn } => OpResult::Write { sn: wsn },
                Completion::ReadDone { value, sn } => OpResult::Read { value, sn },
            };
            let before = match node.status[op] {
                OpStatus::Pending { before } => before,
                _ => unreachable!("completed op was not pending"),
            };
            node.status[op] = OpStatus::Done {
                before,
                result: result.clone(),
            };
            node.done |= 1 << op;
            node.record(p, EventKind::Respond { op, result });
        }
    }
}

fn send<R: Replica>(node: &mut Node<R>, from: ProcessId, to: ProcessId, msg: &Message) {
    node.record(
        from,
        EventKind::Send {
            to,
            msg: msg.clone(),
        },
    );
    if !node.crashed[to.index()] {
        node.in_flight.push((from, to, msg.clone()));
    }
}
