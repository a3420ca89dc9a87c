//! Timestamped run history and its JSONL form.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::Message;
use crate::sim::config::OpCall;
use crate::types::{OpId, ProcessId, RegValue, SeqNo, Tick};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpResult {
    Write { sn: SeqNo },
    Read { value: RegValue, sn: SeqNo },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Invoke {
        op: OpId,
        call: OpCall,
        /// Sequence number assigned to a write.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sn: Option<SeqNo>,
        /// Correlation tag the protocol put on this operation's messages.
        tag: u64,
    },
    Respond {
        op: OpId,
        result: OpResult,
    },
    Send {
        to: ProcessId,
        msg: Message,
    },
    Deliver {
        from: ProcessId,
        msg: Message,
    },
    Crash,
    RoundStart {
        round: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: Tick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<ProcessId>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Trace {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for ev in &self.events {
            serde_json::to_writer(&mut w, ev)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ev = serde_json::from_str(&line).map_err(|source| TraceError::Parse {
                line: i + 1,
                source,
            })?;
            events.push(ev);
        }
        Ok(Trace { events })
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, TraceError> {
        Self::read_jsonl(text.as_bytes())
    }

    /// Point-to-point sends, in trace order.
    pub fn sends(&self) -> impl Iterator<Item = (Tick, ProcessId, ProcessId, &Message)> {
        self.events
            .iter()
            .filter_map(|ev| match (&ev.kind, ev.process) {
                (EventKind::Send { to, msg }, Some(from)) => Some((ev.time, from, *to, msg)),
                _ => None,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_field_order_is_stable() {
        let trace = Trace {
            events: vec![
                TraceEvent {
                    time: 0,
                    process: Some(ProcessId(1)),
                    kind: EventKind::Invoke {
                        op: 0,
                        call: OpCall::Write { value: "a".into() },
                        sn: Some(SeqNo(1)),
                        tag: 1,
                    },
                },
                TraceEvent {
                    time: 0,
                    process: Some(ProcessId(1)),
                    kind: EventKind::Send {
                        to: ProcessId(2),
                        msg: Message::Read { rsn: SeqNo(1) },
                    },
                },
                TraceEvent {
                    time: 3,
                    process: None,
                    kind: EventKind::RoundStart { round: 3 },
                },
                TraceEvent {
                    time: 4,
                    process: Some(ProcessId(2)),
                    kind: EventKind::Respond {
                        op: 1,
                        result: OpResult::Read {
                            value: RegValue::Bottom,
                            sn: SeqNo(0),
                        },
                    },
                },
            ],
        };
        let text = trace.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            r#"{"time":0,"process":1,"kind":"invoke","op":0,"call":{"op":"write","value":"a"},"sn":1,"tag":1}"#
        );
        assert_eq!(
            lines[1],
            r#"{"time":0,"process":1,"kind":"send","to":2,"msg":"020100000000000000"}"#
        );
        assert_eq!(lines[2], r#"{"time":3,"kind":"round_start","round":3}"#);
        assert_eq!(
            lines[3],
            r#"{"time":4,"process":2,"kind":"respond","op":1,"result":{"op":"read","value":null,"sn":0}}"#
        );
        assert_eq!(Trace::from_jsonl(&text).unwrap(), trace);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = Trace::from_jsonl("{\"time\":0,\"kind\":\"crash\"}\nnot json\n").unwrap_err();
        assert!(matches!(err, TraceError::Parse { line: 2, .. }));
    }
}
