//! The differential security harness.
//!
//! Every check runs pairs of low-equivalent initial configurations under the
//! same attacker strategy and compares the attacker's logs step by step:
//!
//! * [`theorem1_check`]: for programs that are constant-time without
//!   declassification, both logs must be equal at every step and both runs
//!   must declassify the same values (public data may be stored to public
//!   memory; secret data may not).
//! * [`theorem2_check`]: for programs that are constant-time up to
//!   declassification, the second configuration runs *patched* with the
//!   first run's declassification trace; logs must be equal and the trace
//!   consumed exactly.
//! * [`classical_decl_check`]: the weaker classical condition, which only
//!   compares pairs whose declassification traces happen to coincide.
//! * [`insecure_leak_search`]: searches strategies and secret pairs for a
//!   divergence witness.
//!
//! Verdicts are "no counterexample found within the budget": strategies are
//! sampled, not enumerated. Experiments are split into independent cells
//! (strategy seed × pair) that may run in parallel; results are merged by
//! cell index, so reports do not depend on scheduling.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{check_constant_time, check_ct_up_to_decl, ArchConfig, CtVerdict, DeclassTrace, Memory, Scenario};
use crate::corpus::Gadget;
use crate::hardware::{
    hw_step, hw_step_patched, HardwareConfig, HwParams, LowSnapshot, Machine, Mode, Violation,
};
use crate::isa::{LabeledValue, Program, Value};
use crate::microctx::{MicroEvent, Script, StrategySpec};

/// Which check produced a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    /// Security of constant-time programs.
    Thm1,
    /// Security up to declassification (patched runs).
    Thm2,
    /// The classical declassification condition.
    Classical,
    /// Search for a divergence witness.
    LeakSearch,
}

impl std::fmt::Display for CheckKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CheckKind::Thm1 => "thm1",
            CheckKind::Thm2 => "thm2",
            CheckKind::Classical => "classical",
            CheckKind::LeakSearch => "leak-search",
        })
    }
}

/// Default number of strategy seeds for theorem checks.
pub const DEFAULT_SEEDS: usize = 100;
/// Default number of low-equivalent pairs per strategy seed.
pub const DEFAULT_PAIRS: usize = 20;
/// Default step bound.
pub const DEFAULT_STEPS: usize = 500;
/// Default number of samples for leak searches.
pub const DEFAULT_LEAK_BUDGET: usize = 10_000;

/// An experiment: what to run, in which mode, and with which budget.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    /// A name for reports (gadget name or program path).
    pub target: String,
    /// Program, partition, initial state and secret domains.
    pub scenario: Scenario,
    /// Machine parameters (mode, capacity, variable-time operators,
    /// monitors).
    pub params: HwParams,
    /// Strategy template; seeded strategies are re-seeded per cell.
    pub strategy: StrategySpec,
    /// Step bound per run.
    pub n: usize,
    /// Number of strategy seeds.
    pub seeds: usize,
    /// Low-equivalent pairs per strategy seed.
    pub pairs: usize,
    /// Master seed: every random choice derives from it.
    pub seed: u64,
    /// Worker threads (`None`: rayon's default).
    pub jobs: Option<usize>,
    /// A scripted attack used as the strategy of seed index 0.
    pub attack: Option<Script>,
}

/// An experiment specification is unusable.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExperimentError {
    /// The step bound is zero.
    #[error("the step bound n must be at least 1")]
    ZeroSteps,
    /// No seeds or no pairs.
    #[error("the budget must include at least one seed and one pair")]
    EmptyBudget,
}

impl ExperimentSpec {
    /// An experiment with the default budget and a seeded-random strategy.
    pub fn new(target: impl Into<String>, scenario: Scenario, mode: Mode) -> Self {
        ExperimentSpec {
            target: target.into(),
            scenario,
            params: HwParams::mode(mode),
            strategy: StrategySpec::SeededRandom { seed: 0 },
            n: DEFAULT_STEPS,
            seeds: DEFAULT_SEEDS,
            pairs: DEFAULT_PAIRS,
            seed: 0,
            jobs: None,
            attack: None,
        }
    }

    /// The default experiment for a catalogued gadget.
    pub fn for_gadget(g: &Gadget, mode: Mode) -> Self {
        let mut spec = ExperimentSpec::new(g.name, g.scenario(), mode);
        spec.n = g.steps;
        spec.attack = g.attack.clone();
        spec
    }

    /// Checks the budget.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.n == 0 {
            return Err(ExperimentError::ZeroSteps);
        }
        if self.seeds == 0 || self.pairs == 0 {
            return Err(ExperimentError::EmptyBudget);
        }
        Ok(())
    }

    /// The machine the experiment simulates.
    pub fn machine(&self) -> Arc<Machine> {
        Machine::new(
            Arc::clone(&self.scenario.program),
            self.scenario.partition.clone(),
            self.params.clone(),
        )
    }

    /// The strategy used by strategy-seed index `k`: the scripted attack
    /// for `k = 0` when there is one, the re-seeded template otherwise.
    pub fn strategy_for(&self, k: usize) -> StrategySpec {
        match (&self.attack, k) {
            (Some(script), 0) => StrategySpec::Scripted(script.clone()),
            _ => self.strategy.with_seed(sub_seed(self.seed, &[STRATEGY_STREAM, k as u64])),
        }
    }

    fn pool(&self) -> rayon::ThreadPool {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            b = b.num_threads(j.max(1));
        }
        b.build().expect("thread pool")
    }
}

const STRATEGY_STREAM: u64 = 1;
const PAIR_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;
const PRECONDITION_STREAM: u64 = 4;

/// Derives an independent seed from a master seed and a path of indices
/// (SplitMix64 finalizer applied along the path).
pub fn sub_seed(seed: u64, path: &[u64]) -> u64 {
    let mut x = seed;
    for &p in path {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p.wrapping_mul(0xd6e8_feb8_6659_fd93));
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

/// Draws a pair of secret assignments; distinct whenever the domains allow
/// it (a few redraws at most).
fn draw_assignments(scenario: &Scenario, rng: &mut ChaCha8Rng) -> (Vec<Value>, Vec<Value>) {
    let a = scenario.random_assignment(rng);
    let can_differ = scenario.sites().iter().any(|(_, d)| d.len() > 1);
    let mut b = scenario.random_assignment(rng);
    let mut tries = 0;
    while can_differ && a == b && tries < 16 {
        b = scenario.random_assignment(rng);
        tries += 1;
    }
    (a, b)
}

/// Builds the hardware configurations of a pair of assignments and checks
/// that they are low-equivalent.
fn instantiate_pair(
    machine: &Arc<Machine>,
    scenario: &Scenario,
    a: &[Value],
    b: &[Value],
    strategy: &StrategySpec,
) -> (HardwareConfig, HardwareConfig) {
    let ha = HardwareConfig::initial(Arc::clone(machine), &scenario.instantiate(a), strategy.clone());
    let hb = HardwareConfig::initial(Arc::clone(machine), &scenario.instantiate(b), strategy.clone());
    assert_eq!(
        LowSnapshot::capture(&ha.mem, &ha.reg, &ha.buf, &machine.partition),
        LowSnapshot::capture(&hb.mem, &hb.reg, &hb.buf, &machine.partition),
        "generated pair is not low-equivalent"
    );
    (ha, hb)
}

/// Two low-equivalent initial hardware configurations: identical on public
/// memory, public registers and `μ0` (the spec's strategy re-seeded with
/// `seed`), with secrets drawn independently from their domains.
pub fn gen_low_equiv_pair(spec: &ExperimentSpec, seed: u64) -> (HardwareConfig, HardwareConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = draw_assignments(&spec.scenario, &mut rng);
    let strategy = spec.strategy.with_seed(seed);
    instantiate_pair(&spec.machine(), &spec.scenario, &a, &b, &strategy)
}

// ---------------------------------------------------------------------------
// Reports and witnesses
// ---------------------------------------------------------------------------

/// Outcome of a check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// No counterexample found within the budget (for a leak search: no
    /// witness found).
    Pass,
    /// A counterexample (witness) was found.
    Fail,
    /// The program does not satisfy the check's software precondition, so
    /// the check does not apply.
    PreconditionViolation,
    /// An invariant monitor fired.
    InvariantViolation,
}

impl Verdict {
    /// The process exit code: 0 pass, 1 fail, 2 precondition, 3 invariant.
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 1,
            Verdict::PreconditionViolation => 2,
            Verdict::InvariantViolation => 3,
        }
    }
}

/// A serializable architectural configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigDump {
    /// Non-zero memory cells as `[address, value]`.
    pub memory: Vec<[Value; 2]>,
    /// Every register (including `pc`) in declaration order.
    pub registers: Vec<RegisterDump>,
}

/// One register of a [`ConfigDump`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterDump {
    /// Register name.
    pub name: String,
    /// Labeled value.
    #[serde(flatten)]
    pub value: LabeledValue,
}

impl ConfigDump {
    /// Dumps a configuration of `p`.
    pub fn of(p: &Program, c: &ArchConfig) -> Self {
        ConfigDump {
            memory: c.mem.iter().map(|(a, v)| [a, v]).collect(),
            registers: p
                .registers()
                .iter()
                .map(|(r, name)| RegisterDump {
                    name: name.to_string(),
                    value: c.get(r),
                })
                .collect(),
        }
    }

    /// Rebuilds the configuration for `p`.
    pub fn restore(&self, p: &Program) -> Result<ArchConfig, ReplayError> {
        let mut c = ArchConfig::initial(p);
        c.mem = self.memory.iter().map(|&[a, v]| (a, v)).collect::<Memory>();
        for r in &self.registers {
            let reg = p
                .reg(&r.name)
                .ok_or_else(|| ReplayError::UnknownRegister(r.name.clone()))?;
            c.set(reg, r.value);
        }
        Ok(c)
    }
}

/// A pair of low-equivalent configurations whose attacker logs diverge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    /// The check that found it.
    pub check: CheckKind,
    /// Machine mode.
    pub mode: Mode,
    /// The strategy both runs used.
    pub strategy: StrategySpec,
    /// Cell (or sample) index within the experiment.
    pub cell: usize,
    /// Secret values of run A, by site.
    pub secrets_a: BTreeMap<String, Value>,
    /// Secret values of run B, by site.
    pub secrets_b: BTreeMap<String, Value>,
    /// Initial configuration of run A.
    pub init_a: ConfigDump,
    /// Initial configuration of run B.
    pub init_b: ConfigDump,
    /// Whether run B is patched with run A's declassification trace.
    pub patched: bool,
    /// Step bound of the minimized witness (`step + 1`).
    pub n: usize,
    /// Index of the first step whose events differ.
    pub step: usize,
    /// Events run A appended at that step.
    pub events_a: Vec<String>,
    /// Events run B appended at that step.
    pub events_b: Vec<String>,
    /// What went wrong.
    pub reason: String,
}

/// A witness cannot be replayed against a program.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    /// The dump names a register the program does not declare.
    #[error("register `{0}` is not declared by the program")]
    UnknownRegister(String),
}

impl Witness {
    /// Re-runs the witness on `machine` and returns the step of the first
    /// divergence (`None` if the runs no longer diverge).
    pub fn replay(&self, machine: &Arc<Machine>) -> Result<Option<usize>, ReplayError> {
        let p = &machine.program;
        let a = self.init_a.restore(p)?;
        let b = self.init_b.restore(p)?;
        let ha = HardwareConfig::initial(Arc::clone(machine), &a, self.strategy.clone());
        let hb = HardwareConfig::initial(Arc::clone(machine), &b, self.strategy.clone());
        let outcome = run_pair(&ha, &hb, self.n, self.patched);
        Ok(match outcome.kind {
            PairKind::Diverged { step, .. } => Some(step),
            _ => None,
        })
    }
}

/// An invariant monitor fired during a check.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantFailure {
    /// Cell (or sample) index.
    pub cell: usize,
    /// Which run (`a` or `b`).
    pub run: String,
    /// Step index.
    pub step: usize,
    /// The violation.
    pub violation: Violation,
}

/// The result of a check, serializable as the verdict file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    /// The check.
    pub check: CheckKind,
    /// Gadget name or program path.
    pub target: String,
    /// Machine mode.
    pub mode: Mode,
    /// Strategy template.
    pub strategy: StrategySpec,
    /// Step bound.
    pub n: usize,
    /// Strategy seeds (leak search: samples).
    pub seeds: usize,
    /// Pairs per seed (leak search: 1).
    pub pairs: usize,
    /// Master seed.
    pub seed: u64,
    /// The verdict.
    pub verdict: Verdict,
    /// Cells examined before the verdict was reached.
    pub cells_checked: usize,
    /// Classical check: pairs with equal declassification traces (compared).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compared: Option<usize>,
    /// Classical check: pairs skipped because their traces differ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<usize>,
    /// Why the precondition failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precondition: Option<String>,
    /// The invariant violation, if one fired.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariant: Option<InvariantFailure>,
    /// The counterexample, on failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    /// Human-readable summary.
    pub summary: String,
}

impl Report {
    fn new(check: CheckKind, spec: &ExperimentSpec) -> Self {
        Report {
            check,
            target: spec.target.clone(),
            mode: spec.params.mode,
            strategy: spec.strategy.clone(),
            n: spec.n,
            seeds: spec.seeds,
            pairs: spec.pairs,
            seed: spec.seed,
            verdict: Verdict::Pass,
            cells_checked: 0,
            compared: None,
            skipped: None,
            precondition: None,
            invariant: None,
            witness: None,
            summary: String::new(),
        }
    }

    /// Whether the verdict is a pass.
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// The verdict file contents (pretty JSON with a trailing newline).
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }
}

// ---------------------------------------------------------------------------
// Running pairs
// ---------------------------------------------------------------------------

/// A completed (or stopped) single run with its per-step log lengths.
struct Recorded {
    config: HardwareConfig,
    /// `lens[k]`: log length after step `k`.
    lens: Vec<usize>,
    /// Declassified values (patched: the unconsumed residual).
    decl: DeclassTrace,
    /// Set when the run stopped early because the machine drained.
    quiescent: bool,
    stop: Option<Stop>,
}

enum Stop {
    Underflow { step: usize, addr: Value },
    Violation { step: usize, violation: Violation },
}

impl Recorded {
    fn steps(&self) -> usize {
        self.lens.len()
    }

    fn events(&self, k: usize) -> &[MicroEvent] {
        let start = if k == 0 { 0 } else { self.lens[k - 1] };
        &self.config.mu.log()[start..self.lens[k]]
    }
}

/// Runs `h0` for up to `n` steps, stopping once the machine has drained (an
/// empty buffer and no instruction at `pc`: every further step stalls, and
/// its only event is the unchanging snapshot), on a monitor violation, or on
/// a declassification-trace underflow.
fn record(h0: &HardwareConfig, n: usize, patch: Option<DeclassTrace>) -> Recorded {
    let mut h = h0.clone();
    let mut lens = Vec::with_capacity(n.min(4096));
    let mut decl = DeclassTrace::new();
    let mut delta = patch;
    let mut stop = None;
    let mut quiescent = false;
    for k in 0..n {
        if h.is_quiescent() {
            quiescent = true;
            break;
        }
        let res = match delta.as_mut() {
            Some(d) => match hw_step_patched(&mut h, d) {
                Ok(s) => s,
                Err(e) => {
                    stop = Some(Stop::Underflow { step: k, addr: e.addr });
                    break;
                }
            },
            None => hw_step(&mut h),
        };
        lens.push(h.mu.log().len());
        decl.extend(res.decl);
        if let Some(v) = res.violations.into_iter().next() {
            stop = Some(Stop::Violation { step: k, violation: v });
            break;
        }
    }
    Recorded {
        config: h,
        lens,
        decl: delta.unwrap_or(decl),
        quiescent,
        stop,
    }
}

/// The events a drained run would append at its next step.
fn drained_step_events(r: &Recorded) -> Vec<MicroEvent> {
    let mut h = r.config.clone();
    let before = h.mu.log().len();
    let mut empty = DeclassTrace::new();
    // A drained machine retires nothing, so patching cannot underflow.
    let _ = hw_step_patched(&mut h, &mut empty);
    h.mu.log()[before..].to_vec()
}

enum PairKind {
    /// Logs equal for the whole bound.
    Equal,
    /// First differing step.
    Diverged {
        step: usize,
        events_a: Vec<MicroEvent>,
        events_b: Vec<MicroEvent>,
        reason: String,
    },
    /// A monitor fired.
    Invariant { run: &'static str, step: usize, violation: Violation },
}

struct PairOutcome {
    kind: PairKind,
    decl_a: DeclassTrace,
    /// Run B's declassified values, or the residual of A's trace when B is
    /// patched.
    decl_b: DeclassTrace,
}

/// Runs A normally and B (optionally patched with A's declassification
/// trace) and compares their logs step by step.
fn run_pair(ha: &HardwareConfig, hb: &HardwareConfig, n: usize, patched: bool) -> PairOutcome {
    let a = record(ha, n, None);
    let b = record(hb, n, patched.then(|| a.decl.clone()));
    let kind = compare(&a, &b, n);
    PairOutcome {
        kind,
        decl_a: a.decl,
        decl_b: b.decl,
    }
}

fn compare(a: &Recorded, b: &Recorded, n: usize) -> PairKind {
    let common = a.steps().min(b.steps());
    let diverged = |step: usize, ea: &[MicroEvent], eb: &[MicroEvent], reason: &str| PairKind::Diverged {
        step,
        events_a: ea.to_vec(),
        events_b: eb.to_vec(),
        reason: reason.to_string(),
    };
    for k in 0..common {
        if a.events(k) != b.events(k) {
            return diverged(k, a.events(k), b.events(k), "attacker logs differ");
        }
    }
    // Monitors and underflows stop a run; report whichever came first.
    for (run, r) in [("a", a), ("b", b)] {
        if let Some(Stop::Violation { step, violation }) = &r.stop {
            if *step <= common {
                return PairKind::Invariant {
                    run,
                    step: *step,
                    violation: violation.clone(),
                };
            }
        }
    }
    if let Some(Stop::Underflow { step, addr }) = &b.stop {
        return diverged(
            *step,
            &[],
            &[],
            &format!("declassification trace exhausted at a public store to address {addr}"),
        );
    }
    if common >= n {
        return PairKind::Equal;
    }
    // At least one run drained before the bound.
    match (a.steps() == common && a.quiescent, b.steps() == common && b.quiescent) {
        (true, true) => {
            let snap = |r: &Recorded| {
                let h = &r.config;
                LowSnapshot::capture(&h.mem, &h.reg, &h.buf, &h.machine.partition)
            };
            if snap(a) == snap(b) {
                // Equal logs and equal low states of drained machines: every
                // later step appends the same snapshot to both.
                PairKind::Equal
            } else {
                diverged(common, &drained_step_events(a), &drained_step_events(b), "attacker logs differ")
            }
        }
        (true, false) => diverged(common, &drained_step_events(a), b.events(common), "attacker logs differ"),
        (false, true) => diverged(common, a.events(common), &drained_step_events(b), "attacker logs differ"),
        (false, false) => PairKind::Equal,
    }
}

fn summaries(events: &[MicroEvent]) -> Vec<String> {
    events.iter().map(MicroEvent::summary).collect()
}

/// One cell's inputs.
struct Cell {
    index: usize,
    strategy: StrategySpec,
    a: Vec<Value>,
    b: Vec<Value>,
}

enum CellResult {
    Pass { decl_equal: bool },
    Fail(Box<Witness>),
    Invariant(InvariantFailure),
}

fn theorem_cells(spec: &ExperimentSpec) -> Vec<Cell> {
    let mut cells = Vec::with_capacity(spec.seeds * spec.pairs);
    for k in 0..spec.seeds {
        let strategy = spec.strategy_for(k);
        for j in 0..spec.pairs {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, &[PAIR_STREAM, k as u64, j as u64]));
            let (a, b) = draw_assignments(&spec.scenario, &mut rng);
            cells.push(Cell {
                index: k * spec.pairs + j,
                strategy: strategy.clone(),
                a,
                b,
            });
        }
    }
    cells
}

fn witness(
    check: CheckKind,
    spec: &ExperimentSpec,
    cell: &Cell,
    patched: bool,
    step: usize,
    events: (&[MicroEvent], &[MicroEvent]),
    reason: String,
) -> Witness {
    let sc = &spec.scenario;
    let p = &sc.program;
    Witness {
        check,
        mode: spec.params.mode,
        strategy: cell.strategy.clone(),
        cell: cell.index,
        secrets_a: sc.describe(&cell.a),
        secrets_b: sc.describe(&cell.b),
        init_a: ConfigDump::of(p, &sc.instantiate(&cell.a)),
        init_b: ConfigDump::of(p, &sc.instantiate(&cell.b)),
        patched,
        n: step + 1,
        step,
        events_a: summaries(events.0),
        events_b: summaries(events.1),
        reason,
    }
}

/// Runs one cell of a theorem-style check.
fn run_cell(check: CheckKind, spec: &ExperimentSpec, machine: &Arc<Machine>, cell: &Cell) -> CellResult {
    let patched = check == CheckKind::Thm2;
    let (ha, hb) = instantiate_pair(machine, &spec.scenario, &cell.a, &cell.b, &cell.strategy);
    let out = run_pair(&ha, &hb, spec.n, patched);
    let decl_equal = out.decl_a == out.decl_b;
    if check == CheckKind::Classical && !decl_equal {
        // The classical condition says nothing about these pairs.
        return CellResult::Pass { decl_equal };
    }
    match out.kind {
        PairKind::Invariant { run, step, violation } => CellResult::Invariant(InvariantFailure {
            cell: cell.index,
            run: run.to_string(),
            step,
            violation,
        }),
        PairKind::Diverged {
            step,
            events_a,
            events_b,
            reason,
        } => CellResult::Fail(Box::new(witness(
            check,
            spec,
            cell,
            patched,
            step,
            (&events_a, &events_b),
            reason,
        ))),
        PairKind::Equal => {
            let residual = match check {
                CheckKind::Thm1 if out.decl_a != out.decl_b => Some(format!(
                    "the runs declassified different values ({:?} vs {:?}); constant-time programs \
                     must not declassify secret data",
                    out.decl_a, out.decl_b
                )),
                CheckKind::Thm2 if !out.decl_b.is_empty() => Some(format!(
                    "{} declassified value(s) left unconsumed by the patched run",
                    out.decl_b.len()
                )),
                _ => None,
            };
            match residual {
                Some(reason) => {
                    let step = spec.n.saturating_sub(1);
                    CellResult::Fail(Box::new(witness(check, spec, cell, patched, step, (&[], &[]), reason)))
                }
                None => CellResult::Pass { decl_equal },
            }
        }
    }
}

fn precondition(check: CheckKind, spec: &ExperimentSpec) -> Option<String> {
    let budget = (spec.seeds * spec.pairs).clamp(1, 2000);
    let seed = sub_seed(spec.seed, &[PRECONDITION_STREAM]);
    let verdict = match check {
        CheckKind::Thm1 => check_constant_time(&spec.scenario, spec.n, budget, seed),
        CheckKind::Thm2 | CheckKind::Classical => check_ct_up_to_decl(&spec.scenario, spec.n, budget, seed),
        CheckKind::LeakSearch => return None,
    };
    match verdict {
        CtVerdict::Pass { .. } => None,
        CtVerdict::Fail(cx) => Some(format!(
            "{} does not hold sequentially: {cx}",
            match check {
                CheckKind::Thm1 => "constant-time",
                _ => "constant-time up to declassification",
            }
        )),
    }
}

fn run_theorem(check: CheckKind, spec: &ExperimentSpec) -> Report {
    let mut report = Report::new(check, spec);
    if let Err(e) = spec.validate() {
        report.verdict = Verdict::PreconditionViolation;
        report.precondition = Some(e.to_string());
        report.summary = e.to_string();
        return report;
    }
    if let Some(why) = precondition(check, spec) {
        report.verdict = Verdict::PreconditionViolation;
        report.summary = format!("precondition violated: {why}");
        report.precondition = Some(why);
        return report;
    }
    let machine = spec.machine();
    let cells = theorem_cells(spec);
    let results: Vec<CellResult> =
        spec.pool().install(|| cells.par_iter().map(|c| run_cell(check, spec, &machine, c)).collect());
    let mut compared = 0;
    let mut skipped = 0;
    for (i, r) in results.into_iter().enumerate() {
        report.cells_checked = i + 1;
        match r {
            CellResult::Pass { decl_equal } => {
                if decl_equal {
                    compared += 1;
                } else {
                    skipped += 1;
                }
            }
            CellResult::Fail(w) => {
                report.verdict = Verdict::Fail;
                report.summary = format!(
                    "counterexample in cell {}: step {}: {}",
                    w.cell, w.step, w.reason
                );
                report.witness = Some(*w);
                break;
            }
            CellResult::Invariant(f) => {
                report.verdict = Verdict::InvariantViolation;
                report.summary = format!(
                    "invariant {:?} violated in cell {} (run {}) at step {}: {}",
                    f.violation.monitor, f.cell, f.run, f.step, f.violation.detail
                );
                report.invariant = Some(f);
                break;
            }
        }
    }
    if check == CheckKind::Classical {
        report.compared = Some(compared);
        report.skipped = Some(skipped);
    }
    if report.verdict == Verdict::Pass {
        report.summary = match check {
            CheckKind::Classical => format!(
                "no counterexample among {compared} pair(s) with equal declassification traces \
                 ({skipped} pair(s) skipped); {} step bound",
                spec.n
            ),
            _ => format!(
                "no counterexample in {} cell(s) ({} seed(s) x {} pair(s)), {} step bound",
                report.cells_checked, spec.seeds, spec.pairs, spec.n
            ),
        };
    }
    report
}

/// Checks security for constant-time programs: every pair's attacker logs
/// are equal at every step and both runs declassify the same values.
///
/// Returns a [`Verdict::PreconditionViolation`] report if the program is not
/// constant-time sequentially.
pub fn theorem1_check(spec: &ExperimentSpec) -> Report {
    run_theorem(CheckKind::Thm1, spec)
}

/// Checks security up to declassification: run B is patched with run A's
/// declassification trace, and the logs must agree with the trace consumed
/// exactly.
pub fn theorem2_check(spec: &ExperimentSpec) -> Report {
    run_theorem(CheckKind::Thm2, spec)
}

/// The classical declassification condition: logs are compared only for
/// pairs whose (unpatched) declassification traces are equal. The report
/// counts compared and skipped pairs.
pub fn classical_decl_check(spec: &ExperimentSpec) -> Report {
    run_theorem(CheckKind::Classical, spec)
}

/// Outcome of a leak search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LeakSearch {
    /// A divergence witness, from the lowest-indexed diverging sample.
    Found(Box<Witness>),
    /// No sample diverged.
    NotFound {
        /// Samples examined.
        samples: usize,
    },
    /// A monitor fired.
    Invariant(InvariantFailure),
}

const LEAK_BATCH: usize = 64;

/// Searches strategies and secret pairs for a divergence of the attacker's
/// logs. Sample 0 uses the spec's scripted attack (if any); every other
/// sample uses a seeded-random strategy. Samples are examined in batches; the witness of
/// the lowest-indexed diverging sample is returned.
pub fn insecure_leak_search(spec: &ExperimentSpec, budget: usize) -> LeakSearch {
    let attack = spec.attack.as_ref();
    let machine = spec.machine();
    let pool = spec.pool();
    let sample = |i: usize| -> Cell {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, &[SAMPLE_STREAM, i as u64]));
        let (a, b) = draw_assignments(&spec.scenario, &mut rng);
        let strategy = match (i, attack) {
            (0, Some(script)) => StrategySpec::Scripted(script.clone()),
            _ => StrategySpec::SeededRandom { seed: rng.gen() },
        };
        Cell {
            index: i,
            strategy,
            a,
            b,
        }
    };
    let mut start = 0;
    while start < budget {
        let end = (start + LEAK_BATCH).min(budget);
        let results: Vec<CellResult> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|i| run_cell(CheckKind::LeakSearch, spec, &machine, &sample(i)))
                .collect()
        });
        for r in results {
            match r {
                CellResult::Pass { .. } => {}
                CellResult::Fail(w) => return LeakSearch::Found(w),
                CellResult::Invariant(f) => return LeakSearch::Invariant(f),
            }
        }
        start = end;
    }
    LeakSearch::NotFound { samples: budget }
}

/// [`insecure_leak_search`] packaged as a report (`Fail` when a witness is
/// found).
pub fn leak_search_report(spec: &ExperimentSpec, budget: usize) -> Report {
    let mut report = Report::new(CheckKind::LeakSearch, spec);
    report.seeds = budget;
    report.pairs = 1;
    match insecure_leak_search(spec, budget) {
        LeakSearch::Found(w) => {
            report.verdict = Verdict::Fail;
            report.cells_checked = w.cell + 1;
            report.summary = format!("witness found in sample {}: step {}: {}", w.cell, w.step, w.reason);
            report.witness = Some(*w);
        }
        LeakSearch::NotFound { samples } => {
            report.cells_checked = samples;
            report.summary = format!("no witness in {samples} sample(s), {} step bound", spec.n);
        }
        LeakSearch::Invariant(f) => {
            report.verdict = Verdict::InvariantViolation;
            report.cells_checked = f.cell + 1;
            report.summary = format!(
                "invariant {:?} violated in sample {} (run {}) at step {}: {}",
                f.violation.monitor, f.cell, f.run, f.step, f.violation.detail
            );
            report.invariant = Some(f);
        }
    }
    report
}

/// Runs a single pair to completion and reports whether the logs diverge:
/// a convenience for examples and tests.
pub fn compare_pair(
    machine: &Arc<Machine>,
    a: &ArchConfig,
    b: &ArchConfig,
    strategy: &StrategySpec,
    n: usize,
    patched: bool,
) -> Option<usize> {
    let ha = HardwareConfig::initial(Arc::clone(machine), a, strategy.clone());
    let hb = HardwareConfig::initial(Arc::clone(machine), b, strategy.clone());
    match run_pair(&ha, &hb, n, patched).kind {
        PairKind::Diverged { step, .. } => Some(step),
        _ => None,
    }
}
