//! Read classification, operation durations, message counts and the bound
//! table each algorithm is held to.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checker::{History, HistoryError, OpKind, OpRecord};
use crate::message::Message;
use crate::sim::config::{Algorithm, NetworkModel, ScenarioConfig};
use crate::sim::trace::{EventKind, Trace};
use crate::types::{OpId, ProcessId, Tick};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadClass {
    /// Write-latency-free: no concurrent write, and the closest preceding
    /// write (if any) did not crash and started more than Δ earlier.
    Wlf,
    InterferingNoCrash,
    InterferingWriterCrash,
}

impl ReadClass {
    pub fn name(self) -> &'static str {
        match self {
            ReadClass::Wlf => "wlf",
            ReadClass::InterferingNoCrash => "interfering_no_crash",
            ReadClass::InterferingWriterCrash => "interfering_writer_crash",
        }
    }
}

fn write_crashed(history: &History, w: &OpRecord) -> bool {
    !w.is_complete() && history.is_faulty(w.process)
}

/// Classifies `read` against the writes of `history`, with `delta` the
/// message delay bound (δ in the round model).
///
/// A write that never completed because its writer crashed is concurrent
/// with every read that starts after it, so such reads always land in the
/// crash class.
pub fn classify_read(history: &History, read: &OpRecord, delta: Tick) -> ReadClass {
    let writes = history.ops.iter().filter(|o| o.kind == OpKind::Write);
    let mut concurrent_crash = false;
    let mut concurrent = false;
    let mut previous: Option<&OpRecord> = None;
    for w in writes {
        if w.precedes(read) {
            if previous.is_none_or(|p| p.invoke < w.invoke) {
                previous = Some(w);
            }
        } else if !read.precedes(w) {
            concurrent = true;
            concurrent_crash |= write_crashed(history, w);
        }
    }
    if concurrent_crash || previous.is_some_and(|w| write_crashed(history, w)) {
        return ReadClass::InterferingWriterCrash;
    }
    let recent = previous.is_some_and(|w| w.invoke + delta >= read.invoke);
    if concurrent || recent {
        ReadClass::InterferingNoCrash
    } else {
        ReadClass::Wlf
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost(Tick),
    Exactly(Tick),
    Informational,
}

impl Bound {
    pub fn admits(self, duration: Tick) -> Option<bool> {
        match self {
            Bound::AtMost(b) => Some(duration <= b),
            Bound::Exactly(b) => Some(duration == b),
            Bound::Informational => None,
        }
    }
}

/// The bound for one operation, by algorithm, network model, kind and class.
pub fn bound_for(
    algorithm: Algorithm,
    network: &NetworkModel,
    kind: OpKind,
    class: Option<ReadClass>,
) -> Bound {
    use Algorithm::*;
    use ReadClass::*;
    match network {
        NetworkModel::Async { .. } => Bound::Informational,
        NetworkModel::BoundedDelay { delta: d, .. } => match (algorithm, kind, class) {
            (_, OpKind::Write, _) => Bound::AtMost(2 * d),
            (Abd, OpKind::Read, _) => Bound::AtMost(4 * d),
            (_, OpKind::Read, Some(Wlf)) => Bound::AtMost(2 * d),
            (_, OpKind::Read, Some(InterferingNoCrash)) => Bound::AtMost(3 * d),
            (TeffModified, OpKind::Read, Some(InterferingWriterCrash)) => Bound::AtMost(4 * d),
            (Teff, OpKind::Read, Some(InterferingWriterCrash)) | (_, OpKind::Read, None) => {
                Bound::Informational
            }
        },
        NetworkModel::RoundSync { delta: d } => match (algorithm, kind, class) {
            (_, OpKind::Write, _) => Bound::Exactly(2 * d),
            (Abd, OpKind::Read, _) => Bound::Exactly(4 * d),
            (_, OpKind::Read, Some(InterferingWriterCrash)) => Bound::AtMost(3 * d),
            (_, OpKind::Read, Some(_)) => Bound::Exactly(2 * d),
            (_, OpKind::Read, None) => Bound::Informational,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpMetrics {
    pub op: OpId,
    pub process: ProcessId,
    pub kind: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<ReadClass>,
    pub invoke: Tick,
    /// `None` for an operation that never responded.
    pub duration: Option<Tick>,
    pub bound: Bound,
    pub within_bound: Option<bool>,
    pub messages: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassAggregate {
    /// `write`, or `read/<class>`.
    pub label: String,
    pub count: usize,
    pub completed: usize,
    pub max_duration: Option<Tick>,
    pub bound: Bound,
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundReport {
    pub algorithm: Algorithm,
    pub network: String,
    /// Δ or δ; absent for async.
    pub unit: Option<Tick>,
    pub informational: bool,
    pub ops: Vec<OpMetrics>,
    pub aggregates: Vec<ClassAggregate>,
    pub violations: usize,
    /// Per process, crash-class reads that took longer than the no-crash
    /// interfering bound allows.
    pub slow_crash_reads: BTreeMap<ProcessId, usize>,
    /// No process had more than one such read.
    pub at_most_once: bool,
}

fn label(kind: OpKind, class: Option<ReadClass>) -> String {
    match (kind, class) {
        (OpKind::Write, _) => "write".into(),
        (OpKind::Read, Some(c)) => format!("read/{}", c.name()),
        (OpKind::Read, None) => "read".into(),
    }
}

pub fn assert_bounds(trace: &Trace, config: &ScenarioConfig) -> Result<BoundReport, HistoryError> {
    let history = History::from_trace(trace)?;
    Ok(bound_report(&history, trace, config))
}

pub fn bound_report(history: &History, trace: &Trace, config: &ScenarioConfig) -> BoundReport {
    let unit = config.network.time_unit();
    let messages = count_messages(trace, history);
    let local_reads = config.algorithm.variant().is_some() && config.options.writer_local_read;
    let slow_threshold = match config.network {
        NetworkModel::BoundedDelay { delta, .. } => Some(3 * delta),
        NetworkModel::RoundSync { delta } => Some(2 * delta),
        NetworkModel::Async { .. } => None,
    };

    let mut ops = Vec::new();
    let mut slow_crash_reads: BTreeMap<ProcessId, usize> = BTreeMap::new();
    for op in &history.ops {
        let class = match (op.kind, unit) {
            (OpKind::Read, Some(d)) => Some(classify_read(history, op, d)),
            _ => None,
        };
        let bound = if local_reads && op.kind == OpKind::Read && op.process == config.writer {
            match config.network {
                NetworkModel::Async { .. } => Bound::Informational,
                _ => Bound::Exactly(0),
            }
        } else {
            bound_for(config.algorithm, &config.network, op.kind, class)
        };
        let duration = op.respond.map(|r| r - op.invoke);
        if class == Some(ReadClass::InterferingWriterCrash)
            && duration.zip(slow_threshold).is_some_and(|(d, b)| d > b)
        {
            *slow_crash_reads.entry(op.process).or_default() += 1;
        }
        ops.push(OpMetrics {
            op: op.id,
            process: op.process,
            kind: op.kind,
            class,
            invoke: op.invoke,
            duration,
            bound,
            within_bound: duration.and_then(|d| bound.admits(d)),
            messages: messages.get(&op.id).copied().unwrap_or(0),
        });
    }

    let mut groups: BTreeMap<(OpKind, Option<ReadClass>), ClassAggregate> = BTreeMap::new();
    for m in &ops {
        let agg = groups
            .entry((m.kind, m.class))
            .or_insert_with(|| ClassAggregate {
                label: label(m.kind, m.class),
                count: 0,
                completed: 0,
                max_duration: None,
                bound: m.bound,
                violations: 0,
            });
        agg.count += 1;
        if let Some(d) = m.duration {
            agg.completed += 1;
            agg.max_duration = agg.max_duration.max(Some(d));
        }
        if m.within_bound == Some(false) {
            agg.violations += 1;
        }
    }
    let aggregates: Vec<ClassAggregate> = groups.into_values().collect();
    let violations = aggregates.iter().map(|a| a.violations).sum();

    BoundReport {
        algorithm: config.algorithm,
        network: config.network.name().into(),
        unit,
        informational: unit.is_none(),
        ops,
        aggregates,
        violations,
        at_most_once: slow_crash_reads.values().all(|&c| c <= 1),
        slow_crash_reads,
    }
}

/// Point-to-point sends attributed to the operation that caused them.
///
/// `WRITE` traffic goes to the write with that sequence number, whoever
/// sends it. `READ` and `STATE` go to the read with that number at the
/// reader. ABD requests and replies go to the requester's operation with
/// that tag. Sends that match no operation are not counted.
pub fn count_messages(trace: &Trace, history: &History) -> BTreeMap<OpId, usize> {
    let mut by_wsn = BTreeMap::new();
    let mut by_tag: BTreeMap<(ProcessId, OpKind, u64), OpId> = BTreeMap::new();
    let mut tags = BTreeMap::new();
    for ev in &trace.events {
        if let (EventKind::Invoke { op, tag, .. }, Some(p)) = (&ev.kind, ev.process) {
            tags.insert(*op, (p, *tag));
        }
    }
    for op in &history.ops {
        if let Some((_, sn)) = &op.written {
            by_wsn.insert(*sn, op.id);
        }
        if let Some(&(p, tag)) = tags.get(&op.id) {
            by_tag.insert((p, op.kind, tag), op.id);
        }
    }
    let abd_op = |p: ProcessId, opsn: u64| {
        by_tag
            .get(&(p, OpKind::Write, opsn))
            .or_else(|| by_tag.get(&(p, OpKind::Read, opsn)))
            .copied()
    };

    let mut counts: BTreeMap<OpId, usize> = BTreeMap::new();
    for (_, from, to, msg) in trace.sends() {
        let owner = match msg {
            Message::Write { wsn, .. } => by_wsn.get(wsn).copied(),
            Message::Read { rsn } => by_tag.get(&(from, OpKind::Read, rsn.0)).copied(),
            Message::State { rsn, .. } => by_tag.get(&(to, OpKind::Read, rsn.0)).copied(),
            Message::AbdUpdate { opsn, .. } | Message::AbdQuery { opsn } => abd_op(from, *opsn),
            Message::AbdAck { opsn } | Message::AbdReport { opsn, .. } => abd_op(to, *opsn),
        };
        if let Some(op) = owner {
            *counts.entry(op).or_default() += 1;
        }
    }
    counts
}
