//! Single-writer ABD register, used as the comparison baseline.
//!
//! A write is one update/ack round trip. A read is a query round trip that
//! picks the freshest `(wsn, v)` among `n - t` reports, followed by an
//! unconditional write-back round trip of that pair.

use std::collections::BTreeSet;

use crate::message::Message;
use crate::protocol::{Cluster, Completion, Dest, Outgoing, Output, ProtocolError, Replica};
use crate::types::{ProcessId, RegValue, SeqNo};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AbdPhase {
    Write,
    Query,
    WriteBack,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AbdPending {
    pub opsn: u64,
    pub phase: AbdPhase,
    pub responders: BTreeSet<ProcessId>,
    pub best: (SeqNo, RegValue),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AbdReplicaState {
    pub me: ProcessId,
    pub cluster: Cluster,
    pub reg: RegValue,
    pub wsn: SeqNo,
    /// Per-process operation counter; tags every request and reply.
    pub opsn: u64,
    pub pending: Option<AbdPending>,
}

impl AbdReplicaState {
    pub fn new(me: ProcessId, cluster: Cluster, initial: RegValue) -> Result<Self, ProtocolError> {
        Cluster::new(cluster.n, cluster.t, cluster.writer)?;
        cluster.check_member(me)?;
        Ok(AbdReplicaState {
            me,
            cluster,
            reg: initial,
            wsn: SeqNo::ZERO,
            opsn: 0,
            pending: None,
        })
    }

    fn start(&mut self, phase: AbdPhase, best: (SeqNo, RegValue)) -> u64 {
        self.opsn += 1;
        self.pending = Some(AbdPending {
            opsn: self.opsn,
            phase,
            responders: BTreeSet::new(),
            best,
        });
        self.opsn
    }

    pub fn abd_begin_write(&mut self, value: RegValue) -> Result<Output, ProtocolError> {
        if self.me != self.cluster.writer {
            return Err(ProtocolError::NotWriter(self.me));
        }
        if self.pending.is_some() {
            return Err(ProtocolError::OperationPending(self.me));
        }
        if value.is_bottom() {
            return Err(ProtocolError::BottomWrite);
        }
        self.wsn = self.wsn.next();
        self.reg = value.clone();
        let opsn = self.start(AbdPhase::Write, (self.wsn, value.clone()));
        Ok(broadcast(Message::AbdUpdate {
            opsn,
            wsn: self.wsn,
            value,
        }))
    }

    pub fn abd_begin_read(&mut self) -> Result<Output, ProtocolError> {
        if self.pending.is_some() {
            return Err(ProtocolError::OperationPending(self.me));
        }
        let opsn = self.start(AbdPhase::Query, (SeqNo::ZERO, RegValue::Bottom));
        Ok(broadcast(Message::AbdQuery { opsn }))
    }

    pub fn abd_on_message(&mut self, from: ProcessId, msg: &Message) -> Output {
        let quorum = self.cluster.quorum();
        let mut out = Output::default();
        match msg {
            Message::AbdUpdate { opsn, wsn, value } => {
                if *wsn > self.wsn {
                    self.wsn = *wsn;
                    self.reg = value.clone();
                }
                out.outgoing.push(Outgoing {
                    dest: Dest::To(from),
                    msg: Message::AbdAck { opsn: *opsn },
                });
            }
            Message::AbdQuery { opsn } => {
                out.outgoing.push(Outgoing {
                    dest: Dest::To(from),
                    msg: Message::AbdReport {
                        opsn: *opsn,
                        wsn: self.wsn,
                        value: self.reg.clone(),
                    },
                });
            }
            Message::AbdReport { opsn, wsn, value } => {
                let Some(p) = self.pending.as_mut() else {
                    return out;
                };
                if p.opsn != *opsn || p.phase != AbdPhase::Query {
                    return out;
                }
                p.responders.insert(from);
                if *wsn > p.best.0 {
                    p.best = (*wsn, value.clone());
                }
                if p.responders.len() >= quorum {
                    let (wsn, value) = p.best.clone();
                    p.phase = AbdPhase::WriteBack;
                    p.responders.clear();
                    out.outgoing.push(Outgoing {
                        dest: Dest::Broadcast,
                        msg: Message::AbdUpdate {
                            opsn: *opsn,
                            wsn,
                            value,
                        },
                    });
                }
            }
            Message::AbdAck { opsn } => {
                let Some(p) = self.pending.as_mut() else {
                    return out;
                };
                if p.opsn != *opsn || p.phase == AbdPhase::Query {
                    return out;
                }
                p.responders.insert(from);
                if p.responders.len() >= quorum {
                    let done = self.pending.take().expect("pending");
                    out.completion = Some(match done.phase {
                        AbdPhase::Write => Completion::WriteDone { wsn: done.best.0 },
                        _ => Completion::ReadDone {
                            value: done.best.1,
                            sn: done.best.0,
                        },
                    });
                }
            }
            _ => {}
        }
        out
    }
}

fn broadcast(msg: Message) -> Output {
    Output {
        outgoing: vec![Outgoing {
            dest: Dest::Broadcast,
            msg,
        }],
        completion: None,
    }
}

impl Replica for AbdReplicaState {
    fn id(&self) -> ProcessId {
        self.me
    }

    fn begin_write(&mut self, value: RegValue) -> Result<Output, ProtocolError> {
        self.abd_begin_write(value)
    }

    fn begin_read(&mut self) -> Result<Output, ProtocolError> {
        self.abd_begin_read()
    }

    fn on_message(&mut self, from: ProcessId, msg: &Message) -> Output {
        self.abd_on_message(from, msg)
    }

    fn op_tag(&self) -> u64 {
        self.opsn
    }

    fn local_wsn(&self) -> SeqNo {
        self.wsn
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(i: u32) -> ProcessId {
        ProcessId(i)
    }

    fn replica(me: u32) -> AbdReplicaState {
        AbdReplicaState::new(p(me), Cluster::new(3, 1, p(1)).unwrap(), RegValue::Bottom).unwrap()
    }

    #[test]
    fn write_broadcasts_update_and_completes_after_two_acks() {
        let mut w = replica(1);
        let out = w.abd_begin_write("a".into()).unwrap();
        assert_eq!(
            out.outgoing[0].msg,
            Message::AbdUpdate {
                opsn: 1,
                wsn: SeqNo(1),
                value: "a".into()
            }
        );
        let out = w.abd_on_message(p(2), &Message::AbdAck { opsn: 1 });
        assert!(out.completion.is_none());
        let out = w.abd_on_message(p(2), &Message::AbdAck { opsn: 1 });
        assert!(out.completion.is_none(), "same sender twice");
        let out = w.abd_on_message(p(3), &Message::AbdAck { opsn: 1 });
        assert_eq!(
            out.completion,
            Some(Completion::WriteDone { wsn: SeqNo(1) })
        );
    }

    #[test]
    fn write_errors() {
        assert_eq!(
            replica(2).abd_begin_write("a".into()),
            Err(ProtocolError::NotWriter(p(2)))
        );
        let mut w = replica(1);
        w.abd_begin_write("a".into()).unwrap();
        assert_eq!(
            w.abd_begin_write("b".into()),
            Err(ProtocolError::OperationPending(p(1)))
        );
        assert_eq!(
            w.abd_begin_read(),
            Err(ProtocolError::OperationPending(p(1)))
        );
    }

    #[test]
    fn server_adopts_only_newer_and_always_acks() {
        let mut s = replica(2);
        s.wsn = SeqNo(1);
        let out = s.abd_on_message(
            p(1),
            &Message::AbdUpdate {
                opsn: 7,
                wsn: SeqNo(3),
                value: "c".into(),
            },
        );
        assert_eq!((s.wsn, s.reg.clone()), (SeqNo(3), "c".into()));
        assert_eq!(out.outgoing[0].msg, Message::AbdAck { opsn: 7 });
        assert_eq!(out.outgoing[0].dest, Dest::To(p(1)));
        let out = s.abd_on_message(
            p(1),
            &Message::AbdUpdate {
                opsn: 8,
                wsn: SeqNo(1),
                value: "a".into(),
            },
        );
        assert_eq!((s.wsn, s.reg.clone()), (SeqNo(3), "c".into()));
        assert_eq!(out.outgoing[0].msg, Message::AbdAck { opsn: 8 });
        let out = s.abd_on_message(p(3), &Message::AbdQuery { opsn: 2 });
        assert_eq!(
            out.outgoing[0].msg,
            Message::AbdReport {
                opsn: 2,
                wsn: SeqNo(3),
                value: "c".into()
            }
        );
    }

    fn report(opsn: u64, wsn: u64, v: RegValue) -> Message {
        Message::AbdReport {
            opsn,
            wsn: SeqNo(wsn),
            value: v,
        }
    }

    #[test]
    fn read_of_initial_value_writes_back_bottom() {
        let mut r = replica(2);
        r.abd_begin_read().unwrap();
        r.abd_on_message(p(2), &report(1, 0, RegValue::Bottom));
        let out = r.abd_on_message(p(3), &report(1, 0, RegValue::Bottom));
        assert_eq!(
            out.outgoing[0].msg,
            Message::AbdUpdate {
                opsn: 1,
                wsn: SeqNo(0),
                value: RegValue::Bottom
            }
        );
        r.abd_on_message(p(1), &Message::AbdAck { opsn: 1 });
        let out = r.abd_on_message(p(3), &Message::AbdAck { opsn: 1 });
        assert_eq!(
            out.completion,
            Some(Completion::ReadDone {
                value: RegValue::Bottom,
                sn: SeqNo(0)
            })
        );
    }

    #[test]
    fn read_picks_maximum_and_ignores_stale_replies() {
        let mut r = replica(2);
        r.abd_begin_read().unwrap();
        // Acks during the query phase are stale.
        assert!(r
            .abd_on_message(p(1), &Message::AbdAck { opsn: 1 })
            .outgoing
            .is_empty());
        r.abd_on_message(p(1), &report(1, 1, "a".into()));
        let out = r.abd_on_message(p(3), &report(1, 2, "b".into()));
        assert_eq!(
            out.outgoing[0].msg,
            Message::AbdUpdate {
                opsn: 1,
                wsn: SeqNo(2),
                value: "b".into()
            }
        );
        // A late report no longer matters.
        assert!(r
            .abd_on_message(p(2), &report(1, 0, RegValue::Bottom))
            .outgoing
            .is_empty());
        r.abd_on_message(p(1), &Message::AbdAck { opsn: 1 });
        let out = r.abd_on_message(p(2), &Message::AbdAck { opsn: 1 });
        assert_eq!(
            out.completion,
            Some(Completion::ReadDone {
                value: "b".into(),
                sn: SeqNo(2)
            })
        );
    }
}
