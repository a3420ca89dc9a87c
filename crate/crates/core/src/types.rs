use std::fmt;
use std::sync::Arc;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

/// Simulated time in integer ticks.
pub type Tick = u64;

/// Index of an operation in a scenario's op schedule.
pub type OpId = usize;

/// Identity of one of the `n` processes, numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(i: usize) -> Self {
        ProcessId(i as u32 + 1)
    }

    /// All processes `p1..=pn` in id order.
    pub fn all(n: usize) -> impl Iterator<Item = ProcessId> {
        (0..n).map(ProcessId::from_index)
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Write or read sequence number. `SeqNo(0)` tags the initial value.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SeqNo(pub u64);

impl SeqNo {
    pub const ZERO: SeqNo = SeqNo(0);

    pub fn next(self) -> SeqNo {
        SeqNo(self.0 + 1)
    }
}

impl fmt::Display for SeqNo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Register contents: either the initial value ⊥ or an opaque byte string.
///
/// In JSON, ⊥ is `null`, UTF-8 payloads are plain strings and anything else
/// is `{"hex": "..."}`.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RegValue {
    #[default]
    Bottom,
    Bytes(Arc<[u8]>),
}

impl RegValue {
    pub fn is_bottom(&self) -> bool {
        matches!(self, RegValue::Bottom)
    }
}

impl From<&str> for RegValue {
    fn from(s: &str) -> Self {
        RegValue::Bytes(s.as_bytes().into())
    }
}

impl From<String> for RegValue {
    fn from(s: String) -> Self {
        RegValue::Bytes(s.into_bytes().into())
    }
}

impl From<Vec<u8>> for RegValue {
    fn from(b: Vec<u8>) -> Self {
        RegValue::Bytes(b.into())
    }
}

impl fmt::Display for RegValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegValue::Bottom => write!(f, "⊥"),
            RegValue::Bytes(b) => match std::str::from_utf8(b) {
                Ok(s) => write!(f, "{s:?}"),
                Err(_) => write!(f, "0x{}", hex::encode(b)),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RegValueRepr {
    Text(String),
    Hex { hex: String },
}

impl Serialize for RegValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RegValue::Bottom => s.serialize_none(),
            RegValue::Bytes(b) => match std::str::from_utf8(b) {
                Ok(text) => RegValueRepr::Text(text.to_owned()).serialize(s),
                Err(_) => RegValueRepr::Hex {
                    hex: hex::encode(b),
                }
                .serialize(s),
            },
        }
    }
}

impl<'de> Deserialize<'de> for RegValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Option::<RegValueRepr>::deserialize(d)? {
            None => Ok(RegValue::Bottom),
            Some(RegValueRepr::Text(s)) => Ok(RegValue::Bytes(s.into_bytes().into())),
            Some(RegValueRepr::Hex { hex }) => hex::decode(hex)
                .map(RegValue::from)
                .map_err(de::Error::custom),
        }
    }
}
