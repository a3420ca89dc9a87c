//! Simulation of the register protocols over a modeled network.

pub mod config;
pub mod engine;
pub mod explore;
pub mod network;
pub mod trace;

pub use config::{
    Algorithm, ConfigError, CrashSpec, CrashTrigger, DelayPolicy, DelayRule, NetworkModel, OpCall,
    OpSpec, ScenarioConfig,
};
pub use engine::{run, run_with, RunOptions, SimError, DEFAULT_EVENT_BUDGET};
pub use network::deliver_semantics;
pub use trace::{EventKind, OpResult, Trace, TraceError, TraceEvent};
