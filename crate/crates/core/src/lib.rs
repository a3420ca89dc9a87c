//! Simulator and checkers for a time-efficient single-writer multi-reader
//! atomic register in crash-prone message-passing systems, with ABD as a
//! baseline.

pub mod abd;
pub mod checker;
pub mod message;
pub mod metrics;
pub mod protocol;
pub mod sim;
pub mod types;

pub use abd::AbdReplicaState;
pub use message::{DecodeError, Message};
pub use protocol::{
    Cluster, Completion, Dest, Outgoing, Output, ProtocolError, Replica, ReplicaState, TeffOptions,
    Variant,
};
pub use types::{OpId, ProcessId, RegValue, SeqNo, Tick};
