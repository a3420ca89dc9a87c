//! Discrete-event execution of a scenario.
//!
//! Events at the same tick run in the order they were scheduled, except that
//! operation invocations at tick `T` run after every other event at `T`, so
//! an operation may start exactly when its predecessor returns.
//!
//! In the round model, sends produced while handling the deliveries that end
//! round `r - 1` go out together at the start of round `r` and arrive δ
//! later, at the end of round `r`.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::abd::AbdReplicaState;
use crate::message::Message;
use crate::protocol::{Completion, Dest, Output, ProtocolError, Replica, ReplicaState};
use crate::sim::config::{ConfigError, CrashTrigger, NetworkModel, OpCall, ScenarioConfig};
use crate::sim::network::{deliver_semantics, DelaySource};
use crate::sim::trace::{EventKind, OpResult, Trace, TraceEvent};
use crate::types::{OpId, ProcessId, RegValue, Tick};

pub const DEFAULT_EVENT_BUDGET: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Maximum number of events processed before the run is abandoned.
    pub event_budget: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            event_budget: DEFAULT_EVENT_BUDGET,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("op {op} at {process}: {source}")]
    Protocol {
        op: OpId,
        process: ProcessId,
        source: ProtocolError,
    },
    #[error("op {op}: {process} is still running op {running}")]
    OverlappingOp {
        op: OpId,
        process: ProcessId,
        running: OpId,
    },
    #[error(
        "event budget of {budget} exhausted at t={time}: {in_flight} messages in flight, \
         {pending_ops} operations pending, {unstarted_ops} not started"
    )]
    EventBudget {
        budget: u64,
        time: Tick,
        in_flight: usize,
        pending_ops: usize,
        unstarted_ops: usize,
    },
}

pub fn run(config: &ScenarioConfig) -> Result<Trace, SimError> {
    run_with(config, RunOptions::default())
}

pub fn run_with(config: &ScenarioConfig, opts: RunOptions) -> Result<Trace, SimError> {
    config.validate()?;
    let cluster = config.cluster()?;
    let n = config.n;
    match config.algorithm.variant() {
        Some(variant) => {
            let replicas = ProcessId::all(n)
                .map(|p| ReplicaState::new(p, cluster, variant, config.options, RegValue::Bottom))
                .collect::<Result<Vec<_>, _>>()
                .map_err(ConfigError::from)?;
            World::new(config, replicas, opts).run()
        }
        None => {
            let replicas = ProcessId::all(n)
                .map(|p| AbdReplicaState::new(p, cluster, RegValue::Bottom))
                .collect::<Result<Vec<_>, _>>()
                .map_err(ConfigError::from)?;
            World::new(config, replicas, opts).run()
        }
    }
}

#[derive(Debug)]
enum Pending {
    Deliver {
        from: ProcessId,
        to: ProcessId,
        msg: Message,
    },
    Crash(ProcessId),
}

#[derive(Debug)]
struct Scheduled {
    time: Tick,
    seq: u64,
    event: Pending,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

#[derive(Debug)]
struct RoundState {
    delta: Tick,
    outbox: Vec<(ProcessId, ProcessId, Message)>,
    /// Crashed mid-broadcast; the crash event follows the round's sends.
    doomed: Vec<ProcessId>,
}

/// One execution: replicas, network and schedule.
#[derive(Debug)]
pub struct World<'a, R: Replica> {
    cfg: &'a ScenarioConfig,
    replicas: Vec<R>,
    crashed: Vec<bool>,
    running: Vec<Option<OpId>>,
    broadcasts: Vec<usize>,
    /// Op ids in invocation order; `next_op` indexes into it.
    op_order: Vec<OpId>,
    next_op: usize,
    now: Tick,
    events: Vec<TraceEvent>,
    queue: BinaryHeap<Reverse<Scheduled>>,
    next_seq: u64,
    delays: DelaySource,
    processed: u64,
    budget: u64,
    round: Option<RoundState>,
}

impl<'a, R: Replica> World<'a, R> {
    pub fn new(cfg: &'a ScenarioConfig, replicas: Vec<R>, opts: RunOptions) -> Self {
        let n = replicas.len();
        let mut op_order: Vec<OpId> = (0..cfg.ops.len()).collect();
        op_order.sort_by_key(|&i| (cfg.ops[i].time, i));
        let round = match cfg.network {
            NetworkModel::RoundSync { delta } => Some(RoundState {
                delta,
                outbox: Vec::new(),
                doomed: Vec::new(),
            }),
            _ => None,
        };
        let mut world = World {
            cfg,
            replicas,
            crashed: vec![false; n],
            running: vec![None; n],
            broadcasts: vec![0; n],
            op_order,
            next_op: 0,
            now: 0,
            events: Vec::new(),
            queue: BinaryHeap::new(),
            next_seq: 0,
            delays: DelaySource::new(&cfg.network, cfg.seed),
            processed: 0,
            budget: opts.event_budget,
            round,
        };
        for crash in &cfg.crashes {
            if let CrashTrigger::At { time } = crash.trigger {
                world.schedule(time, Pending::Crash(crash.process));
            }
        }
        world
    }

    pub fn run(mut self) -> Result<Trace, SimError> {
        if self.round.is_some() {
            while !self.quiescent() {
                self.round_step()?;
            }
        } else {
            while let Some(time) = self.next_time() {
                self.now = time;
                self.step()?;
            }
        }
        Ok(Trace {
            events: self.events,
        })
    }

    fn quiescent(&self) -> bool {
        self.queue.is_empty()
            && self.next_op >= self.op_order.len()
            && self.round.as_ref().is_none_or(|r| r.outbox.is_empty())
    }

    fn next_time(&self) -> Option<Tick> {
        let queued = self.queue.peek().map(|Reverse(s)| s.time);
        let op = self
            .op_order
            .get(self.next_op)
            .map(|&i| self.cfg.ops[i].time);
        match (queued, op) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Processes everything due at `self.now` in the event-driven models.
    fn step(&mut self) -> Result<(), SimError> {
        while self
            .queue
            .peek()
            .is_some_and(|Reverse(s)| s.time == self.now)
        {
            let Reverse(s) = self.queue.pop().expect("peeked");
            self.dispatch(s.event)?;
        }
        self.invoke_due()
    }

    /// Runs round number `now / δ`: the deliveries closing the previous
    /// round, then the round start (crashes, invocations, batched sends).
    pub fn round_step(&mut self) -> Result<(), SimError> {
        let delta = self.round.as_ref().expect("round model").delta;
        let has_outbox = self.round.as_ref().is_some_and(|r| !r.outbox.is_empty());
        if !has_outbox {
            // Skip idle rounds.
            if let Some(t) = self.next_time() {
                self.now = self.now.max(t);
            }
        }
        let mut due = Vec::new();
        while self
            .queue
            .peek()
            .is_some_and(|Reverse(s)| s.time <= self.now)
        {
            due.push(self.queue.pop().expect("peeked").0);
        }
        let (deliveries, crashes): (Vec<_>, Vec<_>) = due
            .into_iter()
            .partition(|s| matches!(s.event, Pending::Deliver { .. }));
        for s in deliveries {
            self.dispatch(s.event)?;
        }
        self.record(
            None,
            EventKind::RoundStart {
                round: self.now / delta,
            },
        );
        for s in crashes {
            self.dispatch(s.event)?;
        }
        self.invoke_due()?;

        let round = self.round.as_mut().expect("round model");
        let outbox = std::mem::take(&mut round.outbox);
        let doomed = std::mem::take(&mut round.doomed);
        for (from, to, msg) in outbox {
            self.transmit(from, to, msg);
        }
        for p in doomed {
            self.record(Some(p), EventKind::Crash);
        }
        self.now += delta;
        Ok(())
    }

    fn schedule(&mut self, time: Tick, event: Pending) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled { time, seq, event }));
    }

    fn record(&mut self, process: Option<ProcessId>, kind: EventKind) {
        self.events.push(TraceEvent {
            time: self.now,
            process,
            kind,
        });
    }

    fn charge(&mut self) -> Result<(), SimError> {
        self.processed += 1;
        if self.processed > self.budget {
            let in_flight = self
                .queue
                .iter()
                .filter(|Reverse(s)| matches!(s.event, Pending::Deliver { .. }))
                .count();
            return Err(SimError::EventBudget {
                budget: self.budget,
                time: self.now,
                in_flight,
                pending_ops: self.running.iter().flatten().count(),
                unstarted_ops: self.op_order.len() - self.next_op,
            });
        }
        Ok(())
    }

    fn dispatch(&mut self, event: Pending) -> Result<(), SimError> {
        self.charge()?;
        match event {
            Pending::Deliver { from, to, msg } => {
                if self.crashed[to.index()] {
                    return Ok(());
                }
                self.record(
                    Some(to),
                    EventKind::Deliver {
                        from,
                        msg: msg.clone(),
                    },
                );
                let out = self.replicas[to.index()].on_message(from, &msg);
                self.handle_output(to, out, None);
            }
            Pending::Crash(p) => {
                if !self.crashed[p.index()] {
                    self.crashed[p.index()] = true;
                    if let Some(round) = self.round.as_mut() {
                        round.outbox.retain(|(from, _, _)| *from != p);
                    }
                    self.record(Some(p), EventKind::Crash);
                }
            }
        }
        Ok(())
    }

    fn invoke_due(&mut self) -> Result<(), SimError> {
        while let Some(&op) = self.op_order.get(self.next_op) {
            if self.cfg.ops[op].time > self.now {
                break;
            }
            self.next_op += 1;
            self.charge()?;
            self.invoke(op)?;
        }
        Ok(())
    }

    fn invoke(&mut self, op: OpId) -> Result<(), SimError> {
        let spec = &self.cfg.ops[op];
        let p = spec.process;
        if self.crashed[p.index()] {
            return Ok(());
        }
        if let Some(running) = self.running[p.index()] {
            return Err(SimError::OverlappingOp {
                op,
                process: p,
                running,
            });
        }
        let replica = &mut self.replicas[p.index()];
        let out = match &spec.call {
            OpCall::Write { value } => replica.begin_write(value.clone()),
            OpCall::Read => replica.begin_read(),
        }
        .map_err(|source| SimError::Protocol {
            op,
            process: p,
            source,
        })?;
        let sn = spec.call.is_write().then(|| replica.local_wsn());
        let tag = replica.op_tag();
        self.running[p.index()] = Some(op);
        self.record(
            Some(p),
            EventKind::Invoke {
                op,
                call: spec.call.clone(),
                sn,
                tag,
            },
        );
        let cut = self.cfg.crashes.iter().find_map(|c| match &c.trigger {
            CrashTrigger::DuringOp { op: o, deliver_to } if *o == op && c.process == p => {
                Some(deliver_to.clone())
            }
            _ => None,
        });
        self.handle_output(p, out, cut);
        Ok(())
    }

    fn broadcast_cut(&self, p: ProcessId, nth: usize) -> Option<Vec<ProcessId>> {
        self.cfg.crashes.iter().find_map(|c| match &c.trigger {
            CrashTrigger::DuringBroadcast { nth: k, deliver_to } if *k == nth && c.process == p => {
                Some(deliver_to.clone())
            }
            _ => None,
        })
    }

    fn handle_output(&mut self, p: ProcessId, out: Output, mut op_cut: Option<Vec<ProcessId>>) {
        for o in out.outgoing {
            match o.dest {
                Dest::To(q) => self.emit(p, q, o.msg),
                Dest::Broadcast => {
                    let nth = self.broadcasts[p.index()];
                    self.broadcasts[p.index()] += 1;
                    let cut = op_cut.take().or_else(|| self.broadcast_cut(p, nth));
                    for q in deliver_semantics(self.cfg.n, cut.as_deref()) {
                        self.emit(p, q, o.msg.clone());
                    }
                    if cut.is_some() {
                        self.crash_now(p);
                        return;
                    }
                }
            }
        }
        if op_cut.is_some() {
            self.crash_now(p);
            return;
        }
        if let Some(c) = out.completion {
            self.respond(p, c);
        }
    }

    fn crash_now(&mut self, p: ProcessId) {
        self.crashed[p.index()] = true;
        match self.round.as_mut() {
            Some(round) => round.doomed.push(p),
            None => self.record(Some(p), EventKind::Crash),
        }
    }

    fn respond(&mut self, p: ProcessId, c: Completion) {
        let op = self.running[p.index()]
            .take()
            .expect("completion without a running operation");
        let result = match c {
            Completion::WriteDone { wsn } => OpResult::Write { sn: wsn },
            Completion::ReadDone { value, sn } => OpResult::Read { value, sn },
        };
        self.record(Some(p), EventKind::Respond { op, result });
    }

    fn emit(&mut self, from: ProcessId, to: ProcessId, msg: Message) {
        match self.round.as_mut() {
            Some(round) => round.outbox.push((from, to, msg)),
            None => self.transmit(from, to, msg),
        }
    }

    fn transmit(&mut self, from: ProcessId, to: ProcessId, msg: Message) {
        self.record(
            Some(from),
            EventKind::Send {
                to,
                msg: msg.clone(),
            },
        );
        let delay = self.delays.delay(self.now, from, to, &msg);
        if !self.crashed[to.index()] {
            self.schedule(self.now + delay, Pending::Deliver { from, to, msg });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::config::{Algorithm, CrashSpec, DelayPolicy, OpSpec};
    use crate::sim::trace::OpResult;
    use crate::types::SeqNo;

    fn p(i: u32) -> ProcessId {
        ProcessId(i)
    }

    fn bounded(delta: Tick, policy: DelayPolicy) -> NetworkModel {
        NetworkModel::BoundedDelay {
            delta,
            policy,
            schedule: vec![],
        }
    }

    fn scenario(algorithm: Algorithm, network: NetworkModel, ops: Vec<OpSpec>) -> ScenarioConfig {
        ScenarioConfig {
            n: 3,
            t: 1,
            algorithm,
            writer: p(1),
            network,
            crashes: vec![],
            ops,
            seed: 42,
            options: Default::default(),
        }
    }

    fn write(time: Tick, v: &str) -> OpSpec {
        OpSpec {
            time,
            process: p(1),
            call: OpCall::Write { value: v.into() },
        }
    }

    fn read(time: Tick, who: u32) -> OpSpec {
        OpSpec {
            time,
            process: p(who),
            call: OpCall::Read,
        }
    }

    fn responses(trace: &Trace) -> Vec<(Tick, OpId, OpResult)> {
        trace
            .events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::Respond { op, result } => Some((e.time, *op, result.clone())),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn sequential_write_then_read() {
        let cfg = scenario(
            Algorithm::Teff,
            bounded(10, DelayPolicy::Uniform),
            vec![write(0, "a"), read(100, 2)],
        );
        let trace = run(&cfg).unwrap();
        let rs = responses(&trace);
        assert_eq!(rs.len(), 2);
        assert_eq!(
            rs[1].2,
            OpResult::Read {
                value: "a".into(),
                sn: SeqNo(1)
            }
        );
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = scenario(
            Algorithm::TeffModified,
            bounded(10, DelayPolicy::Uniform),
            vec![write(0, "a"), read(3, 2), read(5, 3), write(40, "b")],
        );
        assert_eq!(run(&cfg).unwrap().to_jsonl(), run(&cfg).unwrap().to_jsonl());
        let mut other = cfg.clone();
        other.seed = 43;
        assert_ne!(
            run(&cfg).unwrap().to_jsonl(),
            run(&other).unwrap().to_jsonl()
        );
    }

    #[test]
    fn silent_writer_crash_leaves_read_consistent() {
        for algorithm in [Algorithm::Teff, Algorithm::TeffModified, Algorithm::Abd] {
            let mut cfg = scenario(
                algorithm,
                bounded(10, DelayPolicy::Uniform),
                vec![write(0, "a"), read(1, 2), read(60, 3)],
            );
            cfg.crashes.push(CrashSpec {
                process: p(1),
                trigger: CrashTrigger::DuringOp {
                    op: 0,
                    deliver_to: vec![],
                },
            });
            let trace = run(&cfg).unwrap();
            let rs = responses(&trace);
            assert_eq!(rs.len(), 2, "{algorithm:?}: both reads terminate");
            for (_, _, r) in rs {
                assert_eq!(
                    r,
                    OpResult::Read {
                        value: RegValue::Bottom,
                        sn: SeqNo(0)
                    }
                );
            }
            let crash_at = trace
                .events
                .iter()
                .position(|e| e.kind == EventKind::Crash)
                .unwrap();
            assert!(trace.events[crash_at + 1..]
                .iter()
                .all(|e| e.process != Some(p(1))));
        }
    }

    #[test]
    fn partial_broadcast_is_healed_by_forwarding() {
        let mut cfg = scenario(
            Algorithm::Teff,
            bounded(10, DelayPolicy::Max),
            vec![write(0, "a"), read(50, 3)],
        );
        cfg.crashes.push(CrashSpec {
            process: p(1),
            trigger: CrashTrigger::DuringOp {
                op: 0,
                deliver_to: vec![p(2)],
            },
        });
        let trace = run(&cfg).unwrap();
        let sends_from_writer = trace.sends().filter(|(_, f, _, _)| *f == p(1)).count();
        assert_eq!(sends_from_writer, 1);
        let rs = responses(&trace);
        assert_eq!(
            rs,
            vec![(
                70,
                1,
                OpResult::Read {
                    value: "a".into(),
                    sn: SeqNo(1)
                }
            )]
        );
    }

    #[test]
    fn overlapping_ops_are_rejected() {
        let cfg = scenario(
            Algorithm::Teff,
            bounded(10, DelayPolicy::Max),
            vec![read(0, 2), read(5, 2)],
        );
        assert!(matches!(
            run(&cfg),
            Err(SimError::OverlappingOp {
                op: 1,
                process: ProcessId(2),
                running: 0
            })
        ));
    }

    #[test]
    fn back_to_back_ops_may_touch() {
        // Write completes at exactly 20 under max delays; the next starts then.
        let cfg = scenario(
            Algorithm::Teff,
            bounded(10, DelayPolicy::Max),
            vec![write(0, "a"), write(20, "b")],
        );
        let rs = responses(&run(&cfg).unwrap());
        assert_eq!(rs.iter().map(|r| r.0).collect::<Vec<_>>(), vec![20, 40]);
    }

    #[test]
    fn event_budget_guard() {
        let cfg = scenario(
            Algorithm::Teff,
            bounded(10, DelayPolicy::Max),
            vec![write(0, "a")],
        );
        let err = run_with(&cfg, RunOptions { event_budget: 5 }).unwrap_err();
        assert!(matches!(err, SimError::EventBudget { budget: 5, .. }));
    }

    #[test]
    fn round_model_batches_sends() {
        let cfg = scenario(
            Algorithm::TeffModified,
            NetworkModel::RoundSync { delta: 1 },
            vec![write(0, "a"), read(0, 2), read(4, 3)],
        );
        let trace = run(&cfg).unwrap();
        let rs = responses(&trace);
        assert_eq!(rs.iter().map(|r| r.0).collect::<Vec<_>>(), vec![2, 2, 6]);
        let mut last = 0;
        for ev in &trace.events {
            assert!(ev.time >= last);
            last = ev.time;
            if let EventKind::Send { .. } = ev.kind {
                // Every send happens at a round start.
                assert!(trace
                    .events
                    .iter()
                    .any(|e| e.time == ev.time && matches!(e.kind, EventKind::RoundStart { .. })));
            }
        }
    }

    #[test]
    fn crash_at_time_silences_process() {
        let mut cfg = scenario(
            Algorithm::Teff,
            bounded(10, DelayPolicy::Uniform),
            vec![write(0, "a"), read(0, 2), read(10, 3), read(30, 3)],
        );
        cfg.crashes.push(CrashSpec {
            process: p(3),
            trigger: CrashTrigger::At { time: 5 },
        });
        let trace = run(&cfg).unwrap();
        let rs = responses(&trace);
        assert_eq!(rs.len(), 2, "p3 never starts its reads");
        assert!(trace
            .events
            .iter()
            .filter(|e| e.time > 5)
            .all(|e| e.process != Some(p(3))));
    }
}
