//! Scenario description: everything a run needs besides the event budget.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Cluster, ProtocolError, TeffOptions, Variant};
use crate::types::{OpId, ProcessId, RegValue, Tick};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "teff")]
    Teff,
    #[serde(rename = "teff-modified")]
    TeffModified,
    #[serde(rename = "abd")]
    Abd,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Teff => "teff",
            Algorithm::TeffModified => "teff-modified",
            Algorithm::Abd => "abd",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Algorithm::Teff => Some(Variant::Base),
            Algorithm::TeffModified => Some(Variant::Modified),
            Algorithm::Abd => None,
        }
    }
}

/// How the delay of a message without a matching rule is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayPolicy {
    /// Seeded uniform draw from `[1, bound]`.
    #[default]
    Uniform,
    /// Every message takes exactly the bound.
    Max,
    /// The k-th message sent (from 0) takes `k + 1` ticks. Async only.
    Increasing,
}

/// Explicit delay for the messages it matches. The first matching rule wins.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DelayRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<ProcessId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<ProcessId>,
    /// Message tag, e.g. `"WRITE"`, `"READ"`, `"STATE"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    /// Inclusive send-time window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sent_from: Option<Tick>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sent_until: Option<Tick>,
    pub delay: Tick,
}

impl DelayRule {
    pub fn matches(&self, now: Tick, from: ProcessId, to: ProcessId, tag: &str) -> bool {
        self.from.is_none_or(|f| f == from)
            && self.to.is_none_or(|t| t == to)
            && self.tag.as_deref().is_none_or(|t| t == tag)
            && self.sent_from.is_none_or(|lo| now >= lo)
            && self.sent_until.is_none_or(|hi| now <= hi)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkModel {
    /// Finite but unbounded delays, drawn from `[1, Dmax]` unless a rule or
    /// the increasing policy says otherwise.
    Async {
        #[serde(rename = "Dmax")]
        d_max: Tick,
        #[serde(default)]
        policy: DelayPolicy,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        schedule: Vec<DelayRule>,
    },
    /// Every message takes a delay in `[1, Delta]`.
    BoundedDelay {
        #[serde(rename = "Delta")]
        delta: Tick,
        #[serde(default)]
        policy: DelayPolicy,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        schedule: Vec<DelayRule>,
    },
    /// Lock-step rounds of length `delta`.
    RoundSync { delta: Tick },
}

impl NetworkModel {
    pub fn name(&self) -> &'static str {
        match self {
            NetworkModel::Async { .. } => "async",
            NetworkModel::BoundedDelay { .. } => "bounded_delay",
            NetworkModel::RoundSync { .. } => "round_sync",
        }
    }

    /// Δ for bounded delay, δ for rounds, none for async.
    pub fn time_unit(&self) -> Option<Tick> {
        match self {
            NetworkModel::Async { .. } => None,
            NetworkModel::BoundedDelay { delta, .. } | NetworkModel::RoundSync { delta } => {
                Some(*delta)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "trigger", rename_all = "snake_case")]
pub enum CrashTrigger {
    At {
        time: Tick,
    },
    /// Crash while sending the initiating broadcast of op `op`; only
    /// `deliver_to` receive it.
    DuringOp {
        op: OpId,
        deliver_to: Vec<ProcessId>,
    },
    /// Crash while sending this process's `nth` broadcast (from 0, counting
    /// forwards too); only `deliver_to` receive it.
    DuringBroadcast {
        nth: usize,
        deliver_to: Vec<ProcessId>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CrashSpec {
    pub process: ProcessId,
    #[serde(flatten)]
    pub trigger: CrashTrigger,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpCall {
    Write { value: RegValue },
    Read,
}

impl OpCall {
    pub fn is_write(&self) -> bool {
        matches!(self, OpCall::Write { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpSpec {
    pub time: Tick,
    pub process: ProcessId,
    #[serde(flatten)]
    pub call: OpCall,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub t: usize,
    pub algorithm: Algorithm,
    #[serde(default = "default_writer")]
    pub writer: ProcessId,
    pub network: NetworkModel,
    #[serde(default)]
    pub crashes: Vec<CrashSpec>,
    #[serde(default)]
    pub ops: Vec<OpSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub options: TeffOptions,
}

fn default_writer() -> ProcessId {
    ProcessId(1)
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ProtocolError),
    #[error("{count} crashes scheduled but t = {t}")]
    TooManyCrashes { count: usize, t: usize },
    #[error("{0} has more than one crash scheduled")]
    DuplicateCrash(ProcessId),
    #[error("crash of {process} refers to op {op}, which {reason}")]
    BadCrashOp {
        process: ProcessId,
        op: OpId,
        reason: &'static str,
    },
    #[error("op {op}: only the writer {writer} may write")]
    WriteByReader { op: OpId, writer: ProcessId },
    #[error("op {0}: the initial value cannot be written")]
    BottomWrite(OpId),
    #[error("network: {0}")]
    Network(String),
    #[error("round_sync requires {what} at multiples of delta={delta} (got {time})")]
    Unaligned {
        what: &'static str,
        time: Tick,
        delta: Tick,
    },
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cluster(&self) -> Result<Cluster, ConfigError> {
        Ok(Cluster::new(self.n, self.t, self.writer)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let cluster = self.cluster()?;
        for (i, op) in self.ops.iter().enumerate() {
            cluster.check_member(op.process)?;
            if let OpCall::Write { value } = &op.call {
                if op.process != self.writer {
                    return Err(ConfigError::WriteByReader {
                        op: i,
                        writer: self.writer,
                    });
                }
                if value.is_bottom() {
                    return Err(ConfigError::BottomWrite(i));
                }
            }
        }

        if self.crashes.len() > self.t {
            return Err(ConfigError::TooManyCrashes {
                count: self.crashes.len(),
                t: self.t,
            });
        }
        let mut seen = BTreeSet::new();
        for crash in &self.crashes {
            cluster.check_member(crash.process)?;
            if !seen.insert(crash.process) {
                return Err(ConfigError::DuplicateCrash(crash.process));
            }
            match &crash.trigger {
                CrashTrigger::At { .. } => {}
                CrashTrigger::DuringOp { op, deliver_to } => {
                    let spec = self.ops.get(*op).ok_or(ConfigError::BadCrashOp {
                        process: crash.process,
                        op: *op,
                        reason: "does not exist",
                    })?;
                    if spec.process != crash.process {
                        return Err(ConfigError::BadCrashOp {
                            process: crash.process,
                            op: *op,
                            reason: "belongs to another process",
                        });
                    }
                    for p in deliver_to {
                        cluster.check_member(*p)?;
                    }
                }
                CrashTrigger::DuringBroadcast { deliver_to, .. } => {
                    for p in deliver_to {
                        cluster.check_member(*p)?;
                    }
                }
            }
        }

        match &self.network {
            NetworkModel::Async {
                d_max,
                policy: _,
                schedule,
            } => {
                if *d_max == 0 {
                    return Err(ConfigError::Network("Dmax must be at least 1".into()));
                }
                self.check_rules(&cluster, schedule, None)?;
            }
            NetworkModel::BoundedDelay {
                delta,
                policy,
                schedule,
            } => {
                if *delta == 0 {
                    return Err(ConfigError::Network("Delta must be at least 1".into()));
                }
                if *policy == DelayPolicy::Increasing {
                    return Err(ConfigError::Network(
                        "the increasing policy cannot respect a delay bound".into(),
                    ));
                }
                self.check_rules(&cluster, schedule, Some(*delta))?;
            }
            NetworkModel::RoundSync { delta } => {
                if *delta == 0 {
                    return Err(ConfigError::Network("delta must be at least 1".into()));
                }
                for op in &self.ops {
                    if op.time % delta != 0 {
                        return Err(ConfigError::Unaligned {
                            what: "op times",
                            time: op.time,
                            delta: *delta,
                        });
                    }
                }
                for crash in &self.crashes {
                    if let CrashTrigger::At { time } = crash.trigger {
                        if time % delta != 0 {
                            return Err(ConfigError::Unaligned {
                                what: "crash times",
                                time,
                                delta: *delta,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn check_rules(
        &self,
        cluster: &Cluster,
        rules: &[DelayRule],
        bound: Option<Tick>,
    ) -> Result<(), ConfigError> {
        for rule in rules {
            if rule.delay == 0 || bound.is_some_and(|b| rule.delay > b) {
                return Err(ConfigError::Network(format!(
                    "rule delay {} outside [1, {}]",
                    rule.delay,
                    bound.map_or("inf".to_string(), |b| b.to_string())
                )));
            }
            for p in rule.from.iter().chain(rule.to.iter()) {
                cluster.check_member(*p)?;
            }
        }
        Ok(())
    }
}
