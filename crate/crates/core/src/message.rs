//! Protocol messages and their trace wire encoding.
//!
//! Encoding: one tag byte, then each field in order. Sequence numbers are
//! little-endian `u64`. A value is a little-endian `u64` length followed by
//! that many bytes; ⊥ is the length `u64::MAX` with no bytes.

use std::fmt;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::types::{RegValue, SeqNo};

const TAG_WRITE: u8 = 0x01;
const TAG_READ: u8 = 0x02;
const TAG_STATE: u8 = 0x03;
const TAG_STATE_VALUE: u8 = 0x04;
const TAG_ABD_UPDATE: u8 = 0x11;
const TAG_ABD_ACK: u8 = 0x12;
const TAG_ABD_QUERY: u8 = 0x13;
const TAG_ABD_REPORT: u8 = 0x14;

const BOTTOM_LEN: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Message {
    /// `WRITE(wsn, v)`: the writer's broadcast, and every forward of it.
    Write {
        wsn: SeqNo,
        value: RegValue,
    },
    /// `READ(rsn)`: a reader's query.
    Read {
        rsn: SeqNo,
    },
    /// `STATE(rsn, wsn[, v])`: reply to `READ(rsn)`. The value is present
    /// only in the modified variant.
    State {
        rsn: SeqNo,
        wsn: SeqNo,
        value: Option<RegValue>,
    },
    /// ABD write or write-back phase.
    AbdUpdate {
        opsn: u64,
        wsn: SeqNo,
        value: RegValue,
    },
    AbdAck {
        opsn: u64,
    },
    AbdQuery {
        opsn: u64,
    },
    AbdReport {
        opsn: u64,
        wsn: SeqNo,
        value: RegValue,
    },
}

impl Message {
    pub fn tag_name(&self) -> &'static str {
        match self {
            Message::Write { .. } => "WRITE",
            Message::Read { .. } => "READ",
            Message::State { .. } => "STATE",
            Message::AbdUpdate { .. } => "UPDATE",
            Message::AbdAck { .. } => "ACK",
            Message::AbdQuery { .. } => "QUERY",
            Message::AbdReport { .. } => "REPORT",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32);
        match self {
            Message::Write { wsn, value } => {
                out.push(TAG_WRITE);
                put_u64(&mut out, wsn.0);
                put_value(&mut out, value);
            }
            Message::Read { rsn } => {
                out.push(TAG_READ);
                put_u64(&mut out, rsn.0);
            }
            Message::State { rsn, wsn, value } => {
                out.push(if value.is_some() {
                    TAG_STATE_VALUE
                } else {
                    TAG_STATE
                });
                put_u64(&mut out, rsn.0);
                put_u64(&mut out, wsn.0);
                if let Some(v) = value {
                    put_value(&mut out, v);
                }
            }
            Message::AbdUpdate { opsn, wsn, value } => {
                out.push(TAG_ABD_UPDATE);
                put_u64(&mut out, *opsn);
                put_u64(&mut out, wsn.0);
                put_value(&mut out, value);
            }
            Message::AbdAck { opsn } => {
                out.push(TAG_ABD_ACK);
                put_u64(&mut out, *opsn);
            }
            Message::AbdQuery { opsn } => {
                out.push(TAG_ABD_QUERY);
                put_u64(&mut out, *opsn);
            }
            Message::AbdReport { opsn, wsn, value } => {
                out.push(TAG_ABD_REPORT);
                put_u64(&mut out, *opsn);
                put_u64(&mut out, wsn.0);
                put_value(&mut out, value);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
        let mut r = Reader { bytes, pos: 0 };
        let tag = r.u8()?;
        let msg = match tag {
            TAG_WRITE => Message::Write {
                wsn: SeqNo(r.u64()?),
                value: r.value()?,
            },
            TAG_READ => Message::Read {
                rsn: SeqNo(r.u64()?),
            },
            TAG_STATE | TAG_STATE_VALUE => {
                let rsn = SeqNo(r.u64()?);
                let wsn = SeqNo(r.u64()?);
                let value = if tag == TAG_STATE_VALUE {
                    Some(r.value()?)
                } else {
                    None
                };
                Message::State { rsn, wsn, value }
            }
            TAG_ABD_UPDATE => Message::AbdUpdate {
                opsn: r.u64()?,
                wsn: SeqNo(r.u64()?),
                value: r.value()?,
            },
            TAG_ABD_ACK => Message::AbdAck { opsn: r.u64()? },
            TAG_ABD_QUERY => Message::AbdQuery { opsn: r.u64()? },
            TAG_ABD_REPORT => Message::AbdReport {
                opsn: r.u64()?,
                wsn: SeqNo(r.u64()?),
                value: r.value()?,
            },
            other => return Err(DecodeError::UnknownTag(other)),
        };
        if r.pos != bytes.len() {
            return Err(DecodeError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(msg)
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::Write { wsn, value } => write!(f, "WRITE({wsn},{value})"),
            Message::Read { rsn } => write!(f, "READ({rsn})"),
            Message::State {
                rsn,
                wsn,
                value: None,
            } => write!(f, "STATE({rsn},{wsn})"),
            Message::State {
                rsn,
                wsn,
                value: Some(v),
            } => write!(f, "STATE({rsn},{wsn},{v})"),
            Message::AbdUpdate { opsn, wsn, value } => {
                write!(f, "UPDATE#{opsn}({wsn},{value})")
            }
            Message::AbdAck { opsn } => write!(f, "ACK#{opsn}"),
            Message::AbdQuery { opsn } => write!(f, "QUERY#{opsn}"),
            Message::AbdReport { opsn, wsn, value } => {
                write!(f, "REPORT#{opsn}({wsn},{value})")
            }
        }
    }
}

// Traces carry the hex of the wire encoding so golden files are portable.
impl Serialize for Message {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.encode()))
    }
}

impl<'de> Deserialize<'de> for Message {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(text).map_err(de::Error::custom)?;
        Message::decode(&bytes).map_err(de::Error::custom)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of message")]
    Truncated,
    #[error("unknown message tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_value(out: &mut Vec<u8>, v: &RegValue) {
    match v {
        RegValue::Bottom => put_u64(out, BOTTOM_LEN),
        RegValue::Bytes(b) => {
            put_u64(out, b.len() as u64);
            out.extend_from_slice(b);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8], DecodeError> {
        let end = self.pos.checked_add(len).ok_or(DecodeError::Truncated)?;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        let raw = self.take(8)?;
        Ok(u64::from_le_bytes(raw.try_into().expect("8 bytes")))
    }

    fn value(&mut self) -> Result<RegValue, DecodeError> {
        let len = self.u64()?;
        if len == BOTTOM_LEN {
            return Ok(RegValue::Bottom);
        }
        let len = usize::try_from(len).map_err(|_| DecodeError::Truncated)?;
        Ok(RegValue::Bytes(self.take(len)?.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn write_encoding_is_bit_exact() {
        let msg = Message::Write {
            wsn: SeqNo(1),
            value: "a".into(),
        };
        assert_eq!(
            hex::encode(msg.encode()),
            "01\
             0100000000000000\
             0100000000000000\
             61"
        );
    }

    #[test]
    fn bottom_and_base_state_encoding() {
        let msg = Message::State {
            rsn: SeqNo(2),
            wsn: SeqNo(5),
            value: None,
        };
        assert_eq!(
            hex::encode(msg.encode()),
            "0302000000000000000500000000000000"
        );
        let msg = Message::Write {
            wsn: SeqNo(0),
            value: RegValue::Bottom,
        };
        assert_eq!(
            hex::encode(msg.encode()),
            "010000000000000000ffffffffffffffff"
        );
    }

    #[test]
    fn decode_rejects_garbage() {
        assert_eq!(Message::decode(&[]), Err(DecodeError::Truncated));
        assert_eq!(Message::decode(&[0x7f]), Err(DecodeError::UnknownTag(0x7f)));
        let mut bytes = Message::Read { rsn: SeqNo(1) }.encode();
        bytes.push(0);
        assert_eq!(Message::decode(&bytes), Err(DecodeError::TrailingBytes(1)));
        let bytes = Message::Write {
            wsn: SeqNo(1),
            value: "abc".into(),
        }
        .encode();
        assert_eq!(
            Message::decode(&bytes[..bytes.len() - 1]),
            Err(DecodeError::Truncated)
        );
    }

    fn arb_value() -> impl Strategy<Value = RegValue> {
        prop_oneof![
            Just(RegValue::Bottom),
            proptest::collection::vec(any::<u8>(), 0..16).prop_map(RegValue::from),
        ]
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        prop_oneof![
            (any::<u64>(), arb_value()).prop_map(|(w, value)| Message::Write {
                wsn: SeqNo(w),
                value
            }),
            any::<u64>().prop_map(|r| Message::Read { rsn: SeqNo(r) }),
            (
                any::<u64>(),
                any::<u64>(),
                proptest::option::of(arb_value())
            )
                .prop_map(|(r, w, value)| Message::State {
                    rsn: SeqNo(r),
                    wsn: SeqNo(w),
                    value
                }),
            (any::<u64>(), any::<u64>(), arb_value()).prop_map(|(opsn, w, value)| {
                Message::AbdUpdate {
                    opsn,
                    wsn: SeqNo(w),
                    value,
                }
            }),
            any::<u64>().prop_map(|opsn| Message::AbdAck { opsn }),
            any::<u64>().prop_map(|opsn| Message::AbdQuery { opsn }),
            (any::<u64>(), any::<u64>(), arb_value()).prop_map(|(opsn, w, value)| {
                Message::AbdReport {
                    opsn,
                    wsn: SeqNo(w),
                    value,
                }
            }),
        ]
    }

    proptest! {
        #[test]
        fn wire_round_trip(msg in arb_message()) {
            prop_assert_eq!(Message::decode(&msg.encode()).unwrap(), msg.clone());
            let json = serde_json::to_string(&msg).unwrap();
            prop_assert_eq!(serde_json::from_str::<Message>(&json).unwrap(), msg);
        }
    }
}
