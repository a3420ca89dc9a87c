//! Network, crash and determinism invariants over randomly generated
//! scenarios.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regsim_core::checker::{CheckSummary, History};
use regsim_core::sim::{
    run, Algorithm, CrashSpec, CrashTrigger, DelayPolicy, EventKind, NetworkModel, OpCall, OpSpec,
    ScenarioConfig, Trace,
};
use regsim_core::{Message, ProcessId, SeqNo, TeffOptions, Tick};

#[derive(Clone, Copy, Debug)]
enum Net {
    Bounded(Tick),
    Round(Tick),
    Async(Tick),
}

fn algorithm(i: u8) -> Algorithm {
    [Algorithm::Teff, Algorithm::TeffModified, Algorithm::Abd][i as usize % 3]
}

/// Ops spaced far enough apart that a process never overlaps itself, and
/// up to `t` crashes of any kind.
fn scenario(seed: u64, n: usize, alg: Algorithm, net: Net, crashes: bool) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (network, unit) = match net {
        Net::Bounded(d) => (
            NetworkModel::BoundedDelay {
                delta: d,
                policy: DelayPolicy::Uniform,
                schedule: Vec::new(),
            },
            d,
        ),
        Net::Round(d) => (NetworkModel::RoundSync { delta: d }, d),
        Net::Async(d) => (
            NetworkModel::Async {
                d_max: d,
                policy: DelayPolicy::Uniform,
                schedule: Vec::new(),
            },
            d,
        ),
    };
    let t = (n - 1) / 2;
    let mut ops = Vec::new();
    for q in ProcessId::all(n) {
        let mut slot = rng.gen_range(0..4);
        for k in 0..rng.gen_range(0..=3) {
            let call = if q == ProcessId(1) {
                OpCall::Write {
                    value: format!("v{k}").into(),
                }
            } else {
                OpCall::Read
            };
            ops.push(OpSpec {
                time: slot * unit,
                process: q,
                call,
            });
            slot += 5 + rng.gen_range(0..3);
        }
    }
    ops.sort_by_key(|o| (o.time, o.process));
    let mut cfg = ScenarioConfig {
        n,
        t,
        algorithm: alg,
        writer: ProcessId(1),
        network,
        crashes: Vec::new(),
        ops,
        seed,
        options: TeffOptions::default(),
    };
    if crashes {
        let mut victims: Vec<ProcessId> = ProcessId::all(n).collect();
        for _ in 0..rng.gen_range(0..=t) {
            let q = victims.remove(rng.gen_range(0..victims.len()));
            let deliver_to = ProcessId::all(n).filter(|_| rng.gen_bool(0.5)).collect();
            let trigger = if rng.gen_bool(0.5) {
                CrashTrigger::At {
                    time: rng.gen_range(0..20) * unit,
                }
            } else {
                CrashTrigger::DuringBroadcast {
                    nth: rng.gen_range(0..3),
                    deliver_to,
                }
            };
            cfg.crashes.push(CrashSpec {
                process: q,
                trigger,
            });
        }
    }
    cfg
}

type Link = (ProcessId, ProcessId, Message);

/// Pairs every delivery with a send of the same message on the same link,
/// earliest first, and returns the latencies plus the unmatched sends.
fn latencies(trace: &Trace) -> (Vec<Tick>, Vec<(Tick, Link)>) {
    let mut sent: BTreeMap<Link, VecDeque<Tick>> = BTreeMap::new();
    let mut lat = Vec::new();
    for ev in &trace.events {
        let Some(p) = ev.process else { continue };
        match &ev.kind {
            EventKind::Send { to, msg } => {
                sent.entry((p, *to, msg.clone()))
                    .or_default()
                    .push_back(ev.time);
            }
            EventKind::Deliver { from, msg } => {
                let q = sent
                    .get_mut(&(*from, p, msg.clone()))
                    .expect("delivery without a send");
                let s = q.pop_front().expect("delivered twice");
                lat.push(ev.time - s);
            }
            _ => {}
        }
    }
    let rest = sent
        .into_iter()
        .flat_map(|(k, q)| q.into_iter().map(move |t| (t, k.clone())))
        .collect();
    (lat, rest)
}

fn crash_times(trace: &Trace) -> BTreeMap<ProcessId, Tick> {
    trace
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::Crash))
        .filter_map(|e| e.process.map(|p| (p, e.time)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bounded_delay_latencies_stay_within_delta(
        seed: u64, alg in 0u8..3, five: bool, delta in 1u64..20, crashes: bool,
    ) {
        let n = if five { 5 } else { 3 };
        let cfg = scenario(seed, n, algorithm(alg), Net::Bounded(delta), crashes);
        let trace = run(&cfg).unwrap();
        let (lat, _) = latencies(&trace);
        prop_assert!(lat.iter().all(|&l| (1..=delta).contains(&l)), "{lat:?}");
    }

    #[test]
    fn round_latencies_are_exactly_delta(
        seed: u64, alg in 0u8..3, five: bool, delta in 1u64..5, crashes: bool,
    ) {
        let n = if five { 5 } else { 3 };
        let cfg = scenario(seed, n, algorithm(alg), Net::Round(delta), crashes);
        let trace = run(&cfg).unwrap();
        let (lat, _) = latencies(&trace);
        prop_assert!(lat.iter().all(|&l| l == delta), "{lat:?}");
    }

    #[test]
    fn channels_deliver_every_message_to_live_receivers(
        seed: u64, alg in 0u8..3, five: bool, crashes: bool,
    ) {
        let n = if five { 5 } else { 3 };
        let cfg = scenario(seed, n, algorithm(alg), Net::Async(30), crashes);
        let trace = run(&cfg).unwrap();
        let crashed = crash_times(&trace);
        let (_, undelivered) = latencies(&trace);
        for (_, (_, to, msg)) in &undelivered {
            prop_assert!(crashed.contains_key(to), "{msg:?} to live {to} never delivered");
        }
    }

    #[test]
    fn crashed_processes_go_silent(
        seed: u64, alg in 0u8..3, five: bool, bounded: bool,
    ) {
        let n = if five { 5 } else { 3 };
        let net = if bounded { Net::Bounded(10) } else { Net::Round(2) };
        let cfg = scenario(seed, n, algorithm(alg), net, true);
        let trace = run(&cfg).unwrap();
        let mut dead = BTreeSet::new();
        for ev in &trace.events {
            let Some(p) = ev.process else { continue };
            prop_assert!(!dead.contains(&p), "{ev:?} after {p} crashed");
            if matches!(ev.kind, EventKind::Crash) {
                dead.insert(p);
            }
        }
    }

    #[test]
    fn same_seed_same_trace(seed: u64, alg in 0u8..3, five: bool, kind in 0u8..3, crashes: bool) {
        let n = if five { 5 } else { 3 };
        let net = [Net::Bounded(10), Net::Round(1), Net::Async(40)][kind as usize];
        let cfg = scenario(seed, n, algorithm(alg), net, crashes);
        let a = run(&cfg).unwrap().to_jsonl();
        let b = run(&cfg).unwrap().to_jsonl();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(Trace::from_jsonl(&a).unwrap().to_jsonl(), a);
    }

    #[test]
    fn every_history_is_atomic_and_the_checkers_agree(
        seed: u64, alg in 0u8..3, five: bool, kind in 0u8..3, crashes: bool,
    ) {
        let n = if five { 5 } else { 3 };
        let net = [Net::Bounded(10), Net::Round(1), Net::Async(40)][kind as usize];
        let cfg = scenario(seed, n, algorithm(alg), net, crashes);
        let h = History::from_trace(&run(&cfg).unwrap()).unwrap();
        let s = CheckSummary::of(&h);
        prop_assert!(s.pass(), "{s:?}");
        prop_assert_eq!(s.checkers_agree(), Some(true));
    }

    #[test]
    fn each_process_forwards_a_write_at_most_once(
        seed: u64, modified: bool, five: bool, crashes: bool,
    ) {
        let n = if five { 5 } else { 3 };
        let alg = if modified { Algorithm::TeffModified } else { Algorithm::Teff };
        let cfg = scenario(seed, n, alg, Net::Async(30), crashes);
        let trace = run(&cfg).unwrap();
        let mut copies: BTreeMap<(ProcessId, ProcessId, SeqNo), usize> = BTreeMap::new();
        for (_, from, to, msg) in trace.sends() {
            if let Message::Write { wsn, .. } = msg {
                *copies.entry((from, to, *wsn)).or_default() += 1;
            }
        }
        prop_assert!(copies.values().all(|&c| c == 1), "{copies:?}");
    }
}
