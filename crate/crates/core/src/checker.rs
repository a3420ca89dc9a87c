//! Atomic-register checks over recorded histories.
//!
//! Two independent consistency checks are provided: [`check_claims`] tests
//! the three pairwise ordering claims on sequence numbers, and
//! [`check_linearizable`] searches for a legal sequential order. For
//! single-writer histories with recorded sequence numbers they agree.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::trace::{EventKind, OpResult, Trace};
use crate::sim::OpCall;
use crate::types::{OpId, ProcessId, RegValue, SeqNo, Tick};

/// Largest history [`check_linearizable`] will search.
pub const LINEARIZABILITY_LIMIT: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Write,
    Read,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRecord {
    pub id: OpId,
    pub process: ProcessId,
    pub kind: OpKind,
    pub invoke: Tick,
    pub respond: Option<Tick>,
    /// For writes: the value and the sequence number it was written with.
    pub written: Option<(RegValue, SeqNo)>,
    /// For completed reads.
    pub returned: Option<(RegValue, SeqNo)>,
}

impl OpRecord {
    pub fn is_complete(&self) -> bool {
        self.respond.is_some()
    }

    /// `self` responded strictly before `other` was invoked. A process's own
    /// operations are ordered even when one starts at the tick the previous
    /// one returned.
    pub fn precedes(&self, other: &OpRecord) -> bool {
        self.respond.is_some_and(|r| {
            r < other.invoke
                || (r == other.invoke && self.process == other.process && self.id != other.id)
        })
    }

    /// Sequence number carried by the operation: written for writes,
    /// returned for completed reads.
    pub fn sn(&self) -> Option<SeqNo> {
        match self.kind {
            OpKind::Write => self.written.as_ref().map(|w| w.1),
            OpKind::Read => self.returned.as_ref().map(|r| r.1),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct History {
    pub ops: Vec<OpRecord>,
    /// Processes with a crash event, and when.
    pub crashed: BTreeMap<ProcessId, Tick>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HistoryError {
    #[error("op {0} invoked twice")]
    DuplicateInvoke(OpId),
    #[error("op {0} responded without an invocation")]
    UnknownResponse(OpId),
    #[error("op {0} responded twice")]
    DuplicateResponse(OpId),
    #[error("op {op} result does not match its kind")]
    KindMismatch { op: OpId },
    #[error("op {op} invoked at {process} while op {running} is pending")]
    Overlap {
        op: OpId,
        process: ProcessId,
        running: OpId,
    },
    #[error("write op {0} has no sequence number")]
    MissingSeqNo(OpId),
}

impl History {
    pub fn from_trace(trace: &Trace) -> Result<History, HistoryError> {
        let mut ops: BTreeMap<OpId, OpRecord> = BTreeMap::new();
        let mut running: BTreeMap<ProcessId, OpId> = BTreeMap::new();
        let mut crashed = BTreeMap::new();
        for ev in &trace.events {
            let Some(p) = ev.process else { continue };
            match &ev.kind {
                EventKind::Invoke { op, call, sn, .. } => {
                    if ops.contains_key(op) {
                        return Err(HistoryError::DuplicateInvoke(*op));
                    }
                    if let Some(&r) = running.get(&p) {
                        return Err(HistoryError::Overlap {
                            op: *op,
                            process: p,
                            running: r,
                        });
                    }
                    running.insert(p, *op);
                    let (kind, written) = match call {
                        OpCall::Write { value } => (
                            OpKind::Write,
                            Some((value.clone(), sn.ok_or(HistoryError::MissingSeqNo(*op))?)),
                        ),
                        OpCall::Read => (OpKind::Read, None),
                    };
                    ops.insert(
                        *op,
                        OpRecord {
                            id: *op,
                            process: p,
                            kind,
                            invoke: ev.time,
                            respond: None,
                            written,
                            returned: None,
                        },
                    );
                }
                EventKind::Respond { op, result } => {
                    let rec = ops.get_mut(op).ok_or(HistoryError::UnknownResponse(*op))?;
                    if rec.respond.is_some() {
                        return Err(HistoryError::DuplicateResponse(*op));
                    }
                    match (rec.kind, result) {
                        (OpKind::Write, OpResult::Write { sn }) => {
                            if rec.written.as_ref().map(|w| w.1) != Some(*sn) {
                                return Err(HistoryError::KindMismatch { op: *op });
                            }
                        }
                        (OpKind::Read, OpResult::Read { value, sn }) => {
                            rec.returned = Some((value.clone(), *sn));
                        }
                        _ => return Err(HistoryError::KindMismatch { op: *op }),
                    }
                    rec.respond = Some(ev.time);
                    running.remove(&rec.process);
                }
                EventKind::Crash => {
                    crashed.entry(p).or_insert(ev.time);
                }
                _ => {}
            }
        }
        Ok(History {
            ops: ops.into_values().collect(),
            crashed,
        })
    }

    pub fn is_faulty(&self, p: ProcessId) -> bool {
        self.crashed.contains_key(&p)
    }

    pub fn get(&self, id: OpId) -> Option<&OpRecord> {
        self.ops.iter().find(|o| o.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    /// An operation of a correct process never responded.
    NonTermination { op: OpId, process: ProcessId },
    /// A read returned a pair no write produced.
    Validity {
        read: OpId,
        value: RegValue,
        sn: SeqNo,
    },
    /// A read returned a value written after it completed.
    FutureRead { read: OpId, write: OpId },
    /// A read missed a write that completed before it started.
    OverwrittenRead { write: OpId, read: OpId },
    /// A later read returned an older value than an earlier read.
    Inversion { first: OpId, second: OpId },
    /// No legal sequential order exists.
    NotLinearizable,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub violations: Vec<Violation>,
}

impl Verdict {
    fn from_violations(violations: Vec<Violation>) -> Verdict {
        Verdict {
            pass: violations.is_empty(),
            violations,
        }
    }
}

/// Every operation of a correct process responded. A faulty process's last
/// operation is exempt.
pub fn check_termination(history: &History) -> Verdict {
    let mut last: BTreeMap<ProcessId, OpId> = BTreeMap::new();
    for op in &history.ops {
        let e = last.entry(op.process).or_insert(op.id);
        if history.get(*e).is_some_and(|o| o.invoke <= op.invoke) {
            *e = op.id;
        }
    }
    let violations = history
        .ops
        .iter()
        .filter(|op| !op.is_complete())
        .filter(|op| !(history.is_faulty(op.process) && last.get(&op.process) == Some(&op.id)))
        .map(|op| Violation::NonTermination {
            op: op.id,
            process: op.process,
        })
        .collect();
    Verdict::from_violations(violations)
}

/// Validity plus the three ordering claims, over completed reads.
pub fn check_claims(history: &History) -> Verdict {
    let writes: Vec<&OpRecord> = history
        .ops
        .iter()
        .filter(|o| o.kind == OpKind::Write)
        .collect();
    let reads: Vec<&OpRecord> = history
        .ops
        .iter()
        .filter(|o| o.kind == OpKind::Read && o.is_complete())
        .collect();
    let mut violations = Vec::new();

    for r in &reads {
        let (value, sn) = r.returned.clone().expect("completed read");
        let valid = if sn == SeqNo::ZERO {
            value.is_bottom()
        } else {
            writes
                .iter()
                .any(|w| w.written == Some((value.clone(), sn)))
        };
        if !valid {
            violations.push(Violation::Validity {
                read: r.id,
                value,
                sn,
            });
        }
    }
    for r in &reads {
        let x = r.sn().expect("completed read");
        for w in &writes {
            let y = w.sn().expect("write sn");
            if r.precedes(w) && x >= y {
                violations.push(Violation::FutureRead {
                    read: r.id,
                    write: w.id,
                });
            }
            if w.precedes(r) && y > x {
                violations.push(Violation::OverwrittenRead {
                    write: w.id,
                    read: r.id,
                });
            }
        }
    }
    for a in &reads {
        for b in &reads {
            if a.precedes(b) && a.sn() > b.sn() {
                violations.push(Violation::Inversion {
                    first: a.id,
                    second: b.id,
                });
            }
        }
    }
    Verdict::from_violations(violations)
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error(
    "history has {ops} operations, above the search limit of {limit}; rely on the claims check"
)]
pub struct TooLarge {
    pub ops: usize,
    pub limit: usize,
}

/// Searches for a total order extending real-time precedence in which every
/// read returns the latest write before it (or ⊥). Completed operations
/// must all appear; pending writes may or may not. Pending reads are
/// dropped since they returned nothing.
pub fn check_linearizable(history: &History) -> Result<Verdict, TooLarge> {
    let ops: Vec<&OpRecord> = history
        .ops
        .iter()
        .filter(|o| o.is_complete() || o.kind == OpKind::Write)
        .collect();
    if ops.len() > LINEARIZABILITY_LIMIT {
        return Err(TooLarge {
            ops: ops.len(),
            limit: LINEARIZABILITY_LIMIT,
        });
    }
    let k = ops.len();
    // preds[i]: ops that must be linearized before op i.
    let preds: Vec<u32> = (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| ops[j].precedes(ops[i]))
                .fold(0u32, |m, j| m | (1 << j))
        })
        .collect();
    let required: u32 = (0..k)
        .filter(|&i| ops[i].is_complete())
        .fold(0, |m, i| m | (1 << i));

    let mut search = Search {
        ops: &ops,
        preds: &preds,
        required,
        seen: HashSet::new(),
    };
    let ok = search.dfs(0, None);
    Ok(Verdict::from_violations(if ok {
        vec![]
    } else {
        vec![Violation::NotLinearizable]
    }))
}

struct Search<'a> {
    ops: &'a [&'a OpRecord],
    preds: &'a [u32],
    required: u32,
    seen: HashSet<(u32, Option<usize>)>,
}

impl Search<'_> {
    /// `current`: index of the last linearized write, if any.
    fn dfs(&mut self, mask: u32, current: Option<usize>) -> bool {
        if mask & self.required == self.required {
            return true;
        }
        if !self.seen.insert((mask, current)) {
            return false;
        }
        let state = current
            .and_then(|i| self.ops[i].written.clone())
            .unwrap_or((RegValue::Bottom, SeqNo::ZERO));
        for i in 0..self.ops.len() {
            let bit = 1u32 << i;
            if mask & bit != 0 || self.preds[i] & !mask != 0 {
                continue;
            }
            let op = self.ops[i];
            let next = match op.kind {
                OpKind::Write => Some(i),
                OpKind::Read => {
                    if op.returned.as_ref() != Some(&state) {
                        continue;
                    }
                    current
                }
            };
            if self.dfs(mask | bit, next) {
                return true;
            }
        }
        false
    }
}

/// Termination, claims and (when small enough) linearizability together.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub termination: Verdict,
    pub claims: Verdict,
    /// `None` when the history exceeds the search limit.
    pub linearizable: Option<Verdict>,
}

impl CheckSummary {
    pub fn of(history: &History) -> CheckSummary {
        CheckSummary {
            termination: check_termination(history),
            claims: check_claims(history),
            linearizable: check_linearizable(history).ok(),
        }
    }

    pub fn pass(&self) -> bool {
        self.termination.pass
            && self.claims.pass
            && self.linearizable.as_ref().is_none_or(|v| v.pass)
    }

    /// Both consistency checks ran and reached the same answer.
    pub fn checkers_agree(&self) -> Option<bool> {
        self.linearizable
            .as_ref()
            .map(|l| l.pass == self.claims.pass)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(id: OpId, invoke: Tick, respond: Option<Tick>, v: &str, sn: u64) -> OpRecord {
        OpRecord {
            id,
            process: ProcessId(1),
            kind: OpKind::Write,
            invoke,
            respond,
            written: Some((v.into(), SeqNo(sn))),
            returned: None,
        }
    }

    fn r(
        id: OpId,
        p: u32,
        invoke: Tick,
        respond: Option<Tick>,
        v: Option<&str>,
        sn: u64,
    ) -> OpRecord {
        OpRecord {
            id,
            process: ProcessId(p),
            kind: OpKind::Read,
            invoke,
            respond,
            written: None,
            returned: respond.map(|_| (v.map_or(RegValue::Bottom, RegValue::from), SeqNo(sn))),
        }
    }

    fn hist(ops: Vec<OpRecord>) -> History {
        History {
            ops,
            crashed: BTreeMap::new(),
        }
    }

    fn lin(h: &History) -> bool {
        check_linearizable(h).unwrap().pass
    }

    #[test]
    fn empty_history_passes_everything() {
        let h = History::default();
        assert!(CheckSummary::of(&h).pass());
    }

    #[test]
    fn concurrent_read_of_bottom_is_fine() {
        let h = hist(vec![
            w(0, 0, Some(20), "a", 1),
            r(1, 2, 5, Some(10), None, 0),
        ]);
        assert!(check_claims(&h).pass);
        assert!(lin(&h));
    }

    #[test]
    fn read_after_completed_write_must_see_it() {
        let h = hist(vec![
            w(0, 0, Some(20), "a", 1),
            r(1, 2, 30, Some(40), None, 0),
        ]);
        assert_eq!(
            check_claims(&h).violations,
            vec![Violation::OverwrittenRead { write: 0, read: 1 }]
        );
        assert!(!lin(&h));
    }

    #[test]
    fn inversion_is_caught() {
        let h = hist(vec![
            w(0, 0, Some(10), "a", 1),
            w(1, 10, None, "b", 2),
            r(2, 2, 11, Some(15), Some("b"), 2),
            r(3, 3, 16, Some(20), Some("a"), 1),
        ]);
        assert_eq!(
            check_claims(&h).violations,
            vec![Violation::Inversion {
                first: 2,
                second: 3
            }]
        );
        assert!(!lin(&h));
    }

    #[test]
    fn future_read_and_validity() {
        let h = hist(vec![
            r(0, 2, 0, Some(5), Some("a"), 1),
            w(1, 10, Some(20), "a", 1),
        ]);
        assert_eq!(
            check_claims(&h).violations,
            vec![Violation::FutureRead { read: 0, write: 1 }]
        );
        assert!(!lin(&h));

        let h = hist(vec![r(0, 2, 0, Some(5), Some("zz"), 3)]);
        assert!(matches!(
            check_claims(&h).violations[..],
            [Violation::Validity { read: 0, .. }]
        ));
        assert!(!lin(&h));
    }

    #[test]
    fn equal_values_are_told_apart_by_seqno() {
        // Both writes write "a"; the read after the second must carry sn 2.
        let h = hist(vec![
            w(0, 0, Some(10), "a", 1),
            w(1, 10, Some(20), "a", 2),
            r(2, 2, 30, Some(40), Some("a"), 1),
        ]);
        assert!(!check_claims(&h).pass);
        assert!(!lin(&h));
    }

    #[test]
    fn pending_write_may_be_seen_or_not() {
        let seen = hist(vec![
            w(0, 0, None, "a", 1),
            r(1, 2, 50, Some(60), Some("a"), 1),
        ]);
        let unseen = hist(vec![w(0, 0, None, "a", 1), r(1, 2, 50, Some(60), None, 0)]);
        for h in [seen, unseen] {
            assert!(check_claims(&h).pass);
            assert!(lin(&h));
        }
    }

    #[test]
    fn termination_exempts_faulty_last_op_only() {
        let mut h = hist(vec![
            w(0, 0, Some(10), "a", 1),
            w(1, 20, None, "b", 2),
            r(2, 2, 30, None, None, 0),
        ]);
        h.crashed.insert(ProcessId(1), 25);
        assert_eq!(
            check_termination(&h).violations,
            vec![Violation::NonTermination {
                op: 2,
                process: ProcessId(2)
            }]
        );
        h.crashed.insert(ProcessId(2), 35);
        assert!(check_termination(&h).pass);
    }

    #[test]
    fn size_guard() {
        let ops = (0..=LINEARIZABILITY_LIMIT)
            .map(|i| r(i, 2, i as Tick * 10, Some(i as Tick * 10 + 1), None, 0))
            .collect();
        assert!(check_linearizable(&hist(ops)).is_err());
    }

    #[test]
    fn history_from_trace_rejects_malformed() {
        let trace = Trace::from_jsonl(
            r#"{"time":0,"process":2,"kind":"respond","op":0,"result":{"op":"read","value":null,"sn":0}}"#,
        )
        .unwrap();
        assert_eq!(
            History::from_trace(&trace),
            Err(HistoryError::UnknownResponse(0))
        );
        let trace = Trace::from_jsonl(
            "{\"time\":0,\"process\":2,\"kind\":\"invoke\",\"op\":0,\"call\":{\"op\":\"read\"},\"tag\":1}\n\
             {\"time\":1,\"process\":2,\"kind\":\"invoke\",\"op\":1,\"call\":{\"op\":\"read\"},\"tag\":2}\n",
        )
        .unwrap();
        assert!(matches!(
            History::from_trace(&trace),
            Err(HistoryError::Overlap { op: 1, .. })
        ));
    }
}
