//! Event handlers for the time-efficient SWMR register.
//!
//! Every process is both a client (it invokes `write`/`read`) and a server
//! (it keeps a copy of the register and answers other processes). The
//! handlers mutate one [`ReplicaState`] and report the messages to send plus
//! any operation that completed. They never touch a clock or a socket, so
//! replaying the same inputs into a fresh state reproduces the same outputs.
//!
//! The `Modified` variant makes `STATE` replies carry the responder's value
//! and runs them through the same path as a `WRITE`, which lets a reader
//! spread a value it learned from a crashed writer's partial broadcast.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::Message;
use crate::types::{ProcessId, RegValue, SeqNo};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("model requires n >= 1 and 2t < n (got n={n}, t={t})")]
    InvalidModel { n: usize, t: usize },
    #[error("{pid} is outside 1..={n}")]
    ProcessOutOfRange { pid: ProcessId, n: usize },
    #[error("{0} is not the writer")]
    NotWriter(ProcessId),
    #[error("{0} already has an operation in progress")]
    OperationPending(ProcessId),
    #[error("the initial value ⊥ cannot be written")]
    BottomWrite,
}

/// System parameters shared by every replica of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cluster {
    pub n: usize,
    pub t: usize,
    pub writer: ProcessId,
}

impl Cluster {
    pub fn new(n: usize, t: usize, writer: ProcessId) -> Result<Self, ProtocolError> {
        if n == 0 || 2 * t >= n {
            return Err(ProtocolError::InvalidModel { n, t });
        }
        let cluster = Cluster { n, t, writer };
        cluster.check_member(writer)?;
        Ok(cluster)
    }

    /// Size of a quorum, `n - t`.
    pub fn quorum(&self) -> usize {
        self.n - self.t
    }

    pub fn check_member(&self, pid: ProcessId) -> Result<(), ProtocolError> {
        if pid.0 == 0 || pid.0 as usize > self.n {
            return Err(ProtocolError::ProcessOutOfRange { pid, n: self.n });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dest {
    Broadcast,
    To(ProcessId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub dest: Dest,
    pub msg: Message,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Completion {
    WriteDone { wsn: SeqNo },
    ReadDone { value: RegValue, sn: SeqNo },
}

/// What one handler invocation asks the environment to do.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Output {
    pub outgoing: Vec<Outgoing>,
    pub completion: Option<Completion>,
}

impl Output {
    fn broadcast(&mut self, msg: Message) {
        self.outgoing.push(Outgoing {
            dest: Dest::Broadcast,
            msg,
        });
    }

    fn send(&mut self, to: ProcessId, msg: Message) {
        self.outgoing.push(Outgoing {
            dest: Dest::To(to),
            msg,
        });
    }

    fn complete(&mut self, c: Completion) {
        debug_assert!(self.completion.is_none(), "two completions in one step");
        self.completion = Some(c);
    }
}

/// A process running one of the register algorithms.
pub trait Replica: Clone + Debug + Eq + Hash {
    fn id(&self) -> ProcessId;

    fn begin_write(&mut self, value: RegValue) -> Result<Output, ProtocolError>;

    fn begin_read(&mut self) -> Result<Output, ProtocolError>;

    fn on_message(&mut self, from: ProcessId, msg: &Message) -> Output;

    /// Correlation tag carried by the messages of the operation most
    /// recently started here.
    fn op_tag(&self) -> u64;

    /// Sequence number of the value in the local register copy.
    fn local_wsn(&self) -> SeqNo;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Modified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct TeffOptions {
    /// The writer answers its own reads from `reg` without messages.
    pub writer_local_read: bool,
    /// In the modified variant, `STATE(_, s, _)` counts toward the `n - t`
    /// knowledge quorum for `s` exactly like `WRITE(s, _)` does.
    pub quorum_counts_state: bool,
}

impl Default for TeffOptions {
    fn default() -> Self {
        TeffOptions {
            writer_local_read: false,
            quorum_counts_state: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PendingRead {
    pub rsn: SeqNo,
    pub responders: BTreeSet<ProcessId>,
    /// Greatest `wsn` carried by the `STATE(rsn, _)` replies received so far.
    pub maxwsn: SeqNo,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ReplicaState {
    pub me: ProcessId,
    pub cluster: Cluster,
    pub variant: Variant,
    pub options: TeffOptions,
    /// Local copy of the register and its sequence number.
    pub reg: RegValue,
    pub wsn: SeqNo,
    pub rsn: SeqNo,
    /// Newest sequence number this process knows to be held by a quorum.
    pub swsn: SeqNo,
    /// The value whose sequence number is `swsn`.
    pub res: RegValue,
    /// Sequence numbers whose `WRITE` this process already broadcast.
    pub forwarded: BTreeSet<SeqNo>,
    /// Sequence numbers that already moved `swsn`.
    pub swsn_done: BTreeSet<SeqNo>,
    /// Distinct senders known to hold each `s > swsn`.
    pub know_count: BTreeMap<SeqNo, BTreeSet<ProcessId>>,
    pub pending_write: Option<SeqNo>,
    pub pending_read: Option<PendingRead>,
}

impl ReplicaState {
    pub fn new(
        me: ProcessId,
        cluster: Cluster,
        variant: Variant,
        options: TeffOptions,
        initial: RegValue,
    ) -> Result<Self, ProtocolError> {
        Cluster::new(cluster.n, cluster.t, cluster.writer)?;
        cluster.check_member(me)?;
        Ok(ReplicaState {
            me,
            cluster,
            variant,
            options,
            reg: initial.clone(),
            wsn: SeqNo::ZERO,
            rsn: SeqNo::ZERO,
            swsn: SeqNo::ZERO,
            res: initial,
            forwarded: BTreeSet::new(),
            swsn_done: BTreeSet::new(),
            know_count: BTreeMap::new(),
            pending_write: None,
            pending_read: None,
        })
    }

    pub fn is_writer(&self) -> bool {
        self.me == self.cluster.writer
    }

    fn busy(&self) -> bool {
        self.pending_write.is_some() || self.pending_read.is_some()
    }

    pub fn begin_write(&mut self, value: RegValue) -> Result<Output, ProtocolError> {
        if !self.is_writer() {
            return Err(ProtocolError::NotWriter(self.me));
        }
        if self.busy() {
            return Err(ProtocolError::OperationPending(self.me));
        }
        if value.is_bottom() {
            return Err(ProtocolError::BottomWrite);
        }
        self.wsn = self.wsn.next();
        self.reg = value.clone();
        // The initiating broadcast is this process's one broadcast of wsn.
        self.forwarded.insert(self.wsn);
        self.pending_write = Some(self.wsn);
        let mut out = Output::default();
        out.broadcast(Message::Write {
            wsn: self.wsn,
            value,
        });
        Ok(out)
    }

    pub fn begin_read(&mut self) -> Result<Output, ProtocolError> {
        if self.busy() {
            return Err(ProtocolError::OperationPending(self.me));
        }
        let mut out = Output::default();
        if self.options.writer_local_read && self.is_writer() {
            out.complete(Completion::ReadDone {
                value: self.reg.clone(),
                sn: self.wsn,
            });
            return Ok(out);
        }
        self.rsn = self.rsn.next();
        self.pending_read = Some(PendingRead {
            rsn: self.rsn,
            responders: BTreeSet::new(),
            maxwsn: SeqNo::ZERO,
        });
        out.broadcast(Message::Read { rsn: self.rsn });
        Ok(out)
    }

    pub fn on_write(&mut self, wsn: SeqNo, value: RegValue, sender: ProcessId) -> Output {
        let mut out = Output::default();
        self.absorb_write(wsn, value, sender, true, &mut out);
        out
    }

    pub fn on_read(&mut self, rsn: SeqNo, sender: ProcessId) -> Output {
        let value = match self.variant {
            Variant::Base => None,
            Variant::Modified => Some(self.reg.clone()),
        };
        let mut out = Output::default();
        out.send(
            sender,
            Message::State {
                rsn,
                wsn: self.wsn,
                value,
            },
        );
        out
    }

    pub fn on_state(
        &mut self,
        rsn: SeqNo,
        wsn: SeqNo,
        value: Option<RegValue>,
        sender: ProcessId,
    ) -> Output {
        let mut out = Output::default();
        if self.variant == Variant::Modified {
            // wsn 0 is the initial value every process already holds.
            if let Some(v) = value.filter(|_| wsn > SeqNo::ZERO) {
                let counts = self.options.quorum_counts_state;
                self.absorb_write(wsn, v, sender, counts, &mut out);
            }
        }
        if let Some(pending) = self.pending_read.as_mut().filter(|p| p.rsn == rsn) {
            pending.responders.insert(sender);
            pending.maxwsn = pending.maxwsn.max(wsn);
            if let Some((value, sn)) = self.check_read_complete() {
                out.complete(Completion::ReadDone { value, sn });
            }
        }
        out
    }

    /// Returns `(res, swsn)` and clears the pending read once replies from a
    /// quorum are in and `swsn` has caught up with every reported `wsn`.
    pub fn check_read_complete(&mut self) -> Option<(RegValue, SeqNo)> {
        let pending = self.pending_read.as_ref()?;
        if pending.responders.len() >= self.cluster.quorum() && self.swsn >= pending.maxwsn {
            self.pending_read = None;
            return Some((self.res.clone(), self.swsn));
        }
        None
    }

    fn absorb_write(
        &mut self,
        wsn: SeqNo,
        value: RegValue,
        sender: ProcessId,
        counts_toward_quorum: bool,
        out: &mut Output,
    ) {
        if wsn > self.wsn {
            self.reg = value.clone();
            self.wsn = wsn;
        }
        // May fire for wsn < self.wsn: first receipt can lag the local copy.
        if self.forwarded.insert(wsn) {
            out.broadcast(Message::Write {
                wsn,
                value: value.clone(),
            });
        }
        if !counts_toward_quorum || wsn <= self.swsn {
            return;
        }
        let holders = self.know_count.entry(wsn).or_default();
        holders.insert(sender);
        if holders.len() < self.cluster.quorum() {
            return;
        }
        if self.swsn_done.insert(wsn) {
            self.swsn = wsn;
            self.res = value;
            let swsn = self.swsn;
            self.know_count.retain(|s, _| *s > swsn);
        }
        if self.pending_write == Some(wsn) {
            self.pending_write = None;
            out.complete(Completion::WriteDone { wsn });
        } else if self.pending_read.is_some() {
            if let Some((value, sn)) = self.check_read_complete() {
                out.complete(Completion::ReadDone { value, sn });
            }
        }
    }
}

impl Replica for ReplicaState {
    fn id(&self) -> ProcessId {
        self.me
    }

    fn begin_write(&mut self, value: RegValue) -> Result<Output, ProtocolError> {
        ReplicaState::begin_write(self, value)
    }

    fn begin_read(&mut self) -> Result<Output, ProtocolError> {
        ReplicaState::begin_read(self)
    }

    fn on_message(&mut self, from: ProcessId, msg: &Message) -> Output {
        match msg {
            Message::Write { wsn, value } => self.on_write(*wsn, value.clone(), from),
            Message::Read { rsn } => self.on_read(*rsn, from),
            Message::State { rsn, wsn, value } => self.on_state(*rsn, *wsn, value.clone(), from),
            // Not part of this protocol; absorbed.
            _ => Output::default(),
        }
    }

    fn op_tag(&self) -> u64 {
        match (self.pending_write, &self.pending_read) {
            (Some(w), _) => w.0,
            (None, Some(r)) => r.rsn.0,
            (None, None) => 0,
        }
    }

    fn local_wsn(&self) -> SeqNo {
        self.wsn
    }
}
