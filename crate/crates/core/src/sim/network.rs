use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::message::Message;
use crate::sim::config::{DelayPolicy, DelayRule, NetworkModel};
use crate::types::{ProcessId, Tick};

/// Receivers of a broadcast by a sender that may crash part-way through it.
///
/// Without a crash every process, the sender included, receives the message.
/// With a crash exactly the named subset does. Sends go out in id order.
pub fn deliver_semantics(n: usize, crash_point: Option<&[ProcessId]>) -> Vec<ProcessId> {
    match crash_point {
        None => ProcessId::all(n).collect(),
        Some(subset) => {
            let subset: BTreeSet<ProcessId> = subset.iter().copied().collect();
            ProcessId::all(n).filter(|p| subset.contains(p)).collect()
        }
    }
}

/// Per-message delay oracle for one run.
#[derive(Debug)]
pub(crate) struct DelaySource {
    rng: ChaCha8Rng,
    bound: Tick,
    policy: DelayPolicy,
    rules: Vec<DelayRule>,
    sent: u64,
}

impl DelaySource {
    pub(crate) fn new(model: &NetworkModel, seed: u64) -> Self {
        let (bound, policy, rules) = match model {
            NetworkModel::Async {
                d_max,
                policy,
                schedule,
            } => (*d_max, *policy, schedule.clone()),
            NetworkModel::BoundedDelay {
                delta,
                policy,
                schedule,
            } => (*delta, *policy, schedule.clone()),
            NetworkModel::RoundSync { delta } => (*delta, DelayPolicy::Max, Vec::new()),
        };
        DelaySource {
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound,
            policy,
            rules,
            sent: 0,
        }
    }

    pub(crate) fn delay(
        &mut self,
        now: Tick,
        from: ProcessId,
        to: ProcessId,
        msg: &Message,
    ) -> Tick {
        let k = self.sent;
        self.sent += 1;
        let tag = msg.tag_name();
        if let Some(rule) = self.rules.iter().find(|r| r.matches(now, from, to, tag)) {
            return rule.delay;
        }
        match self.policy {
            DelayPolicy::Uniform => self.rng.gen_range(1..=self.bound),
            DelayPolicy::Max => self.bound,
            DelayPolicy::Increasing => k + 1,
        }
    }
}
