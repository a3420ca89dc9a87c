//! Command implementations behind the `regsim` binary: single runs, seed
//! sweeps, exhaustive exploration and offline trace checking.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use regsim_core::checker::{CheckSummary, History, HistoryError};
use regsim_core::metrics::{bound_report, BoundReport, ClassAggregate};
use regsim_core::sim::explore::{explore_with, ExploreError, ExploreSpec, PlannedOp};
use regsim_core::sim::{
    run_with, Algorithm, RunOptions, ScenarioConfig, SimError, Trace, DEFAULT_EVENT_BUDGET,
};
use regsim_core::{ProcessId, RegValue};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Process exit statuses.
pub mod exit {
    pub const PASS: u8 = 0;
    pub const CHECK_FAILED: u8 = 1;
    pub const CONFIG_ERROR: u8 = 2;
    pub const RESOURCE_BOUND: u8 = 3;
}

pub const EVENT_BUDGET_VAR: &str = "REGSIM_EVENT_BUDGET";

/// Run options, with the event budget taken from `REGSIM_EVENT_BUDGET` when set.
pub fn run_options_from_env() -> Result<RunOptions, CliError> {
    match std::env::var(EVENT_BUDGET_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(|event_budget| RunOptions { event_budget })
            .map_err(|_| CliError::Config(format!("{EVENT_BUDGET_VAR}={v:?} is not a count"))),
        Err(_) => Ok(RunOptions {
            event_budget: DEFAULT_EVENT_BUDGET,
        }),
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid input.
    Config(String),
    /// A run or exploration hit its resource limit.
    Resource(String),
    /// A check failed or a run could not complete.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG_ERROR,
            CliError::Resource(_) => exit::RESOURCE_BOUND,
            CliError::Failed(_) => exit::CHECK_FAILED,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Resource(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Config(e.to_string()),
            SimError::EventBudget { .. } => CliError::Resource(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<HistoryError> for CliError {
    fn from(e: HistoryError) -> Self {
        CliError::Failed(format!("malformed history: {e}"))
    }
}

pub fn load_config(text: &str) -> Result<ScenarioConfig, CliError> {
    ScenarioConfig::from_json(text).map_err(|e| CliError::Config(e.to_string()))
}

/// SHA-256 of the config's canonical JSON form.
pub fn scenario_digest(config: &ScenarioConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(canonical))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageTable {
    pub total: usize,
    pub by_tag: BTreeMap<String, usize>,
}

impl MessageTable {
    pub fn of(trace: &Trace) -> MessageTable {
        let mut table = MessageTable::default();
        for (_, _, _, msg) in trace.sends() {
            table.total += 1;
            *table.by_tag.entry(msg.tag_name().to_owned()).or_default() += 1;
        }
        table
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_digest: String,
    pub algorithm: Algorithm,
    pub network: String,
    pub seed: u64,
    pub checks: CheckSummary,
    pub bounds: BoundReport,
    pub messages: MessageTable,
    pub pass: bool,
}

impl RunReport {
    /// Everything here is a function of the config and the trace, so a
    /// stored trace regenerates the same report.
    pub fn build(config: &ScenarioConfig, trace: &Trace) -> Result<RunReport, HistoryError> {
        let history = History::from_trace(trace)?;
        let checks = CheckSummary::of(&history);
        let bounds = bound_report(&history, trace, config);
        let pass = checks.pass() && bounds.violations == 0;
        Ok(RunReport {
            scenario_digest: scenario_digest(config),
            algorithm: config.algorithm,
            network: config.network.name().to_owned(),
            seed: config.seed,
            checks,
            bounds,
            messages: MessageTable::of(trace),
            pass,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub struct RunOutcome {
    pub trace: Trace,
    pub report: RunReport,
}

pub fn run_scenario(config: &ScenarioConfig, opts: RunOptions) -> Result<RunOutcome, CliError> {
    let trace = run_with(config, opts)?;
    let report = RunReport::build(config, &trace)?;
    Ok(RunOutcome { trace, report })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub scenario_digest: String,
    pub algorithm: Algorithm,
    pub network: String,
    pub first_seed: u64,
    pub runs: u64,
    /// Per class, merged over all runs.
    pub aggregates: Vec<ClassAggregate>,
    pub bound_violations: usize,
    pub check_failures: usize,
    /// Seeds whose run failed a check or a bound, in increasing order.
    pub failing_seeds: Vec<u64>,
    pub pass: bool,
}

/// Runs seeds `first_seed .. first_seed + runs` in parallel.
///
/// A run that cannot complete aborts the sweep with its seed in the error.
pub fn sweep(
    config: &ScenarioConfig,
    first_seed: u64,
    runs: u64,
    opts: RunOptions,
) -> Result<SweepReport, CliError> {
    let seeds: Vec<u64> = (0..runs).map(|i| first_seed + i).collect();
    let reports = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = config.clone();
            cfg.seed = seed;
            run_scenario(&cfg, opts)
                .map(|o| o.report)
                .map_err(|e| (seed, e))
        })
        .collect::<Vec<_>>();

    let mut merged: BTreeMap<String, ClassAggregate> = BTreeMap::new();
    let mut bound_violations = 0;
    let mut check_failures = 0;
    let mut failing_seeds = Vec::new();
    for (seed, r) in seeds.iter().zip(reports) {
        let report = r.map_err(|(seed, e)| match e {
            CliError::Config(m) => CliError::Config(m),
            CliError::Resource(m) => CliError::Resource(format!("seed {seed}: {m}")),
            CliError::Failed(m) => CliError::Failed(format!("seed {seed}: {m}")),
        })?;
        for a in &report.bounds.aggregates {
            let m = merged
                .entry(a.label.clone())
                .or_insert_with(|| ClassAggregate {
                    count: 0,
                    completed: 0,
                    max_duration: None,
                    violations: 0,
                    ..a.clone()
                });
            m.count += a.count;
            m.completed += a.completed;
            m.max_duration = m.max_duration.max(a.max_duration);
            m.violations += a.violations;
        }
        bound_violations += report.bounds.violations;
        if !report.checks.pass() {
            check_failures += 1;
        }
        if !report.pass {
            failing_seeds.push(*seed);
        }
    }
    Ok(SweepReport {
        scenario_digest: scenario_digest(config),
        algorithm: config.algorithm,
        network: config.network.name().to_owned(),
        first_seed,
        runs,
        aggregates: merged.into_values().collect(),
        bound_violations,
        check_failures,
        pass: failing_seeds.is_empty(),
        failing_seeds,
    })
}

/// Parses a comma-separated operation list such as `w,r2,r3` or `w:x,r2`.
///
/// `w` is a write by the writer (values default to `v1`, `v2`, ...), `rK`
/// a read by process K.
pub fn parse_ops(text: &str, writer: ProcessId) -> Result<Vec<PlannedOp>, CliError> {
    let mut ops = Vec::new();
    let mut writes = 0;
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let bad = || CliError::Config(format!("bad operation {item:?}; expected w, w:VALUE or rK"));
        if let Some(rest) = item.strip_prefix('w') {
            writes += 1;
            let value = match rest.strip_prefix(':') {
                Some(v) if !v.is_empty() => RegValue::from(v),
                None if rest.is_empty() => RegValue::from(format!("v{writes}")),
                _ => return Err(bad()),
            };
            ops.push(PlannedOp::write(writer, value));
        } else if let Some(rest) = item.strip_prefix('r') {
            let p: u32 = rest.parse().map_err(|_| bad())?;
            ops.push(PlannedOp::read(ProcessId(p)));
        } else {
            return Err(bad());
        }
    }
    Ok(ops)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreSummary {
    pub algorithm: Option<Algorithm>,
    pub crash_writer: bool,
    pub states: usize,
    pub traces: usize,
    pub claims_failures: usize,
    pub linearizability_failures: usize,
    pub termination_failures: usize,
    /// Histories on which the claims and the linearizability search disagree.
    pub disagreements: usize,
    /// Histories too large for the linearizability search.
    pub unchecked: usize,
    pub pass: bool,
}

impl ExploreSummary {
    pub fn absorb(&mut self, summary: &CheckSummary) {
        self.traces += 1;
        if !summary.termination.pass {
            self.termination_failures += 1;
        }
        if !summary.claims.pass {
            self.claims_failures += 1;
        }
        match &summary.linearizable {
            Some(v) if !v.pass => self.linearizability_failures += 1,
            Some(_) => {}
            None => self.unchecked += 1,
        }
        if summary.checkers_agree() == Some(false) {
            self.disagreements += 1;
        }
    }

    fn finish(&mut self) {
        self.pass = self.termination_failures == 0
            && self.claims_failures == 0
            && self.linearizability_failures == 0
            && self.disagreements == 0
            && self.unchecked == 0;
    }
}

/// Explores `spec` and checks every terminal history.
pub fn explore_and_check(
    spec: &ExploreSpec,
    max_states: usize,
) -> Result<ExploreSummary, CliError> {
    if spec.n > 3 {
        return Err(CliError::Config(format!(
            "exploration is limited to n <= 3 (got n = {})",
            spec.n
        )));
    }
    let mut summary = ExploreSummary {
        algorithm: Some(spec.algorithm),
        crash_writer: spec.crashable.contains(&spec.writer),
        ..Default::default()
    };
    let mut malformed = None;
    let result = explore_with(spec, max_states, |trace| match History::from_trace(trace) {
        Ok(h) => summary.absorb(&CheckSummary::of(&h)),
        Err(e) => malformed = malformed.take().or(Some(e)),
    });
    if let Some(e) = malformed {
        return Err(e.into());
    }
    match result {
        Ok(stats) => {
            summary.states = stats.states;
            summary.finish();
            Ok(summary)
        }
        Err(ExploreError::BoundExceeded { .. }) => Err(CliError::Resource(format!(
            "{}; {} traces checked so far",
            result.unwrap_err(),
            summary.traces
        ))),
        Err(e @ (ExploreError::Model(_) | ExploreError::TooManyOps(_))) => {
            Err(CliError::Config(e.to_string()))
        }
        Err(e) => Err(CliError::Failed(e.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceCheck {
    pub checks: CheckSummary,
    pub pass: bool,
}

/// Checks a stored trace without its config: termination and consistency only.
pub fn check_trace(trace: &Trace) -> Result<TraceCheck, CliError> {
    let history = History::from_trace(trace)?;
    let checks = CheckSummary::of(&history);
    Ok(TraceCheck {
        pass: checks.pass(),
        checks,
    })
}
