//! Sequential (architectural) semantics, its patched variant, and the dynamic
//! constant-time checkers that define the software side of the contract.
//!
//! An architectural configuration is a memory and a total register map. Each
//! step executes the instruction at `pc` and emits one [`Observation`]
//! (control-flow outcome or memory address) plus, for stores to public
//! memory, a declassified value.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{Instruction, LabeledValue, Program, Reg, SecLevel, SecretPartition, Value};

/// Sparse memory: every address not stored explicitly holds 0.
///
/// Cells holding 0 are never stored, so two memories are equal as Rust values
/// exactly when they are equal as functions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Memory {
    cells: BTreeMap<Value, Value>,
}

impl Memory {
    /// The all-zero memory.
    pub fn new() -> Self {
        Memory::default()
    }

    /// Reads address `a`.
    #[inline]
    pub fn get(&self, a: Value) -> Value {
        self.cells.get(&a).copied().unwrap_or(0)
    }

    /// Writes `v` to address `a`.
    #[inline]
    pub fn set(&mut self, a: Value, v: Value) {
        if v == 0 {
            self.cells.remove(&a);
        } else {
            self.cells.insert(a, v);
        }
    }

    /// Non-zero cells in address order.
    pub fn iter(&self) -> impl Iterator<Item = (Value, Value)> + '_ {
        self.cells.iter().map(|(&a, &v)| (a, v))
    }
}

impl FromIterator<(Value, Value)> for Memory {
    fn from_iter<I: IntoIterator<Item = (Value, Value)>>(iter: I) -> Self {
        let mut m = Memory::new();
        for (a, v) in iter {
            m.set(a, v);
        }
        m
    }
}

/// An architectural configuration `⟨m, r⟩`.
///
/// `reg` is indexed by [`Reg::index`] and always total.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    /// Memory.
    pub mem: Memory,
    /// Register values, indexed by register.
    pub reg: Vec<LabeledValue>,
}

impl ArchConfig {
    /// The configuration with zeroed memory, every register `0^L` and `pc`
    /// at the program's entry point.
    pub fn initial(p: &Program) -> Self {
        let mut reg = vec![LabeledValue::low(0); p.registers().len()];
        reg[Reg::PC.index()] = LabeledValue::low(p.entry());
        ArchConfig {
            mem: Memory::new(),
            reg,
        }
    }

    /// The current program counter.
    #[inline]
    pub fn pc(&self) -> Value {
        self.reg[Reg::PC.index()].value
    }

    /// Reads register `r`.
    #[inline]
    pub fn get(&self, r: Reg) -> LabeledValue {
        self.reg[r.index()]
    }

    /// Writes register `r`.
    #[inline]
    pub fn set(&mut self, r: Reg, v: LabeledValue) {
        self.reg[r.index()] = v;
    }
}

/// What a constant-time attacker observes of one architectural step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Observation {
    /// A conditional branch: whether its condition was zero (jump taken).
    BranchOutcome(bool),
    /// An indirect jump's target.
    JumpTarget(Value),
    /// A load's address.
    LoadAddr(Value),
    /// A store's address.
    StoreAddr(Value),
    /// An assignment; nothing observable.
    Epsilon,
}

/// A declassification trace: the values written to public memory, oldest
/// first.
pub type DeclassTrace = VecDeque<Value>;

/// A patched store to public memory found the declassification trace empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("declassification trace exhausted at a public store to address {addr}")]
pub struct DeclassUnderflow {
    /// Address of the store that found no value to write.
    pub addr: Value,
}

/// Outcome of one architectural step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchStep {
    /// `pc` has no instruction: the program has terminated.
    Halt,
    /// One instruction executed.
    Step {
        /// The observation emitted.
        obs: Observation,
        /// The value declassified by a store to public memory.
        decl: Option<Value>,
    },
}

/// One architectural step; `patch`, when present, supplies the values written
/// by stores to public memory.
fn step_inner(
    p: &Program,
    part: &SecretPartition,
    c: &mut ArchConfig,
    patch: Option<&mut DeclassTrace>,
) -> Result<ArchStep, DeclassUnderflow> {
    let l = c.pc();
    let Some(ins) = p.get(l) else {
        return Ok(ArchStep::Halt);
    };
    let next = LabeledValue::low(l.wrapping_add(1));
    let step = match ins {
        Instruction::Beqz(e, target) => {
            let taken = e.eval_total(&c.reg).value == 0;
            let pc = if taken { LabeledValue::low(*target) } else { next };
            c.set(Reg::PC, pc);
            ArchStep::Step {
                obs: Observation::BranchOutcome(taken),
                decl: None,
            }
        }
        Instruction::Jmp(e) => {
            let target = e.eval_total(&c.reg).value;
            c.set(Reg::PC, LabeledValue::low(target));
            ArchStep::Step {
                obs: Observation::JumpTarget(target),
                decl: None,
            }
        }
        Instruction::Mov(x, e) => {
            let v = e.eval_total(&c.reg);
            c.set(*x, v);
            c.set(Reg::PC, next);
            ArchStep::Step {
                obs: Observation::Epsilon,
                decl: None,
            }
        }
        Instruction::Load(x, e) => {
            let a = e.eval_total(&c.reg).value;
            c.set(*x, LabeledValue::new(c.mem.get(a), part.level(a)));
            c.set(Reg::PC, next);
            ArchStep::Step {
                obs: Observation::LoadAddr(a),
                decl: None,
            }
        }
        Instruction::Store(ea, ev) => {
            let a = ea.eval_total(&c.reg).value;
            let v = ev.eval_total(&c.reg).value;
            let public = part.level(a) == SecLevel::L;
            let written = match patch {
                Some(delta) if public => delta.pop_front().ok_or(DeclassUnderflow { addr: a })?,
                _ => v,
            };
            c.mem.set(a, written);
            c.set(Reg::PC, next);
            ArchStep::Step {
                obs: Observation::StoreAddr(a),
                decl: public.then_some(v),
            }
        }
    };
    Ok(step)
}

/// One step of the sequential semantics.
///
/// A store to an address with `ξ(a) = L` declassifies the stored value.
pub fn arch_step(p: &Program, part: &SecretPartition, c: &mut ArchConfig) -> ArchStep {
    step_inner(p, part, c, None).expect("unpatched steps never consume a declassification trace")
}

/// One step of the patched sequential semantics: identical to [`arch_step`]
/// except that a store to public memory writes the head of `delta` (which it
/// consumes) instead of the computed value.
///
/// The returned [`ArchStep::Step::decl`] is the value the unpatched store
/// would have declassified.
pub fn arch_step_patched(
    p: &Program,
    part: &SecretPartition,
    c: &mut ArchConfig,
    delta: &mut DeclassTrace,
) -> Result<ArchStep, DeclassUnderflow> {
    step_inner(p, part, c, Some(delta))
}

/// The result of running the sequential semantics for a bounded number of
/// steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchRun {
    /// The final configuration.
    pub config: ArchConfig,
    /// One observation per executed step.
    pub obs: Vec<Observation>,
    /// Declassified values, in order.
    pub decl: DeclassTrace,
    /// Whether the program halted within the bound.
    pub halted: bool,
}

/// Runs at most `n` steps (fewer if the program halts).
pub fn arch_run(p: &Program, part: &SecretPartition, c0: &ArchConfig, n: usize) -> ArchRun {
    let mut c = c0.clone();
    let mut obs = Vec::new();
    let mut decl = DeclassTrace::new();
    let mut halted = false;
    for _ in 0..n {
        match arch_step(p, part, &mut c) {
            ArchStep::Halt => {
                halted = true;
                break;
            }
            ArchStep::Step { obs: o, decl: d } => {
                obs.push(o);
                decl.extend(d);
            }
        }
    }
    if !halted && p.get(c.pc()).is_none() {
        halted = true;
    }
    ArchRun {
        config: c,
        obs,
        decl,
        halted,
    }
}

/// Runs at most `n` patched steps; the returned [`ArchRun::decl`] is the
/// residual (unconsumed) part of `delta`.
pub fn arch_run_patched(
    p: &Program,
    part: &SecretPartition,
    c0: &ArchConfig,
    mut delta: DeclassTrace,
    n: usize,
) -> Result<ArchRun, DeclassUnderflow> {
    let mut c = c0.clone();
    let mut obs = Vec::new();
    let mut halted = false;
    for _ in 0..n {
        match arch_step_patched(p, part, &mut c, &mut delta)? {
            ArchStep::Halt => {
                halted = true;
                break;
            }
            ArchStep::Step { obs: o, .. } => obs.push(o),
        }
    }
    if !halted && p.get(c.pc()).is_none() {
        halted = true;
    }
    Ok(ArchRun {
        config: c,
        obs,
        decl: delta,
        halted,
    })
}

// ---------------------------------------------------------------------------
// Scenarios: initial states with secret inputs
// ---------------------------------------------------------------------------

/// A secret input location.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SecretSite {
    /// A memory cell (must be `H` under the partition).
    Mem(Value),
    /// A register (labeled `H` in every initial configuration).
    Reg(Reg),
}

impl SecretSite {
    /// The site's name: `mem:<addr>` or `reg:<name>`.
    pub fn name(&self, p: &Program) -> String {
        match self {
            SecretSite::Mem(a) => format!("mem:{a}"),
            SecretSite::Reg(r) => format!("reg:{}", p.registers().name(*r)),
        }
    }

    /// Parses a name produced by [`SecretSite::name`].
    pub fn parse(s: &str, p: &Program) -> Option<SecretSite> {
        if let Some(a) = s.strip_prefix("mem:") {
            return a.parse().ok().map(SecretSite::Mem);
        }
        if let Some(r) = s.strip_prefix("reg:") {
            return p.reg(r).map(SecretSite::Reg);
        }
        None
    }
}

/// The finite value domains secret sites are drawn from.
pub type SecretDomains = BTreeMap<SecretSite, Vec<Value>>;

/// Domain used for secret registers that have no declared domain.
pub const DEFAULT_DOMAIN: [Value; 2] = [0, 1];

/// Above this many distinct pairs, pairs are sampled instead of enumerated.
pub const EXHAUSTIVE_PAIR_LIMIT: usize = 4096;

/// Error validating a [`Scenario`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    /// A memory secret site is public under the partition.
    #[error("secret domain declared for public address {0}")]
    PublicMemorySite(Value),
    /// A domain is empty.
    #[error("empty secret domain for {0}")]
    EmptyDomain(String),
    /// The initial register vector does not match the program.
    #[error("initial configuration has {got} registers, the program declares {want}")]
    RegisterCount {
        /// Registers in the configuration.
        got: usize,
        /// Registers the program declares.
        want: usize,
    },
    /// `pc` is labeled secret.
    #[error("the initial pc must be public")]
    SecretPc,
}

/// Everything needed to instantiate initial configurations: the program, the
/// partition, a base initial state and the domains of the secret inputs.
///
/// Two configurations instantiated from the same scenario are low-equivalent
/// by construction: they differ only at secret sites.
#[derive(Clone, Debug)]
pub struct Scenario {
    /// The program.
    pub program: Arc<Program>,
    /// The memory partition `ξ`.
    pub partition: SecretPartition,
    /// Base initial state; secret sites are overwritten on instantiation.
    pub init: ArchConfig,
    sites: Vec<(SecretSite, Vec<Value>)>,
}

impl Scenario {
    /// Validates and builds a scenario.
    ///
    /// Registers labeled `H` in `init` without a declared domain draw from
    /// [`DEFAULT_DOMAIN`].
    pub fn new(
        program: Arc<Program>,
        partition: SecretPartition,
        init: ArchConfig,
        mut domains: SecretDomains,
    ) -> Result<Scenario, ScenarioError> {
        if init.reg.len() != program.registers().len() {
            return Err(ScenarioError::RegisterCount {
                got: init.reg.len(),
                want: program.registers().len(),
            });
        }
        if init.get(Reg::PC).level == SecLevel::H
            || domains.contains_key(&SecretSite::Reg(Reg::PC))
        {
            return Err(ScenarioError::SecretPc);
        }
        for (i, v) in init.reg.iter().enumerate() {
            if v.level == SecLevel::H {
                domains
                    .entry(SecretSite::Reg(Reg(i as u16)))
                    .or_insert_with(|| DEFAULT_DOMAIN.to_vec());
            }
        }
        for (site, dom) in &domains {
            if let SecretSite::Mem(a) = site {
                if partition.level(*a) == SecLevel::L {
                    return Err(ScenarioError::PublicMemorySite(*a));
                }
            }
            if dom.is_empty() {
                return Err(ScenarioError::EmptyDomain(site.name(&program)));
            }
        }
        let mut init = init;
        for site in domains.keys() {
            if let SecretSite::Reg(r) = site {
                let v = init.get(*r).value;
                init.set(*r, LabeledValue::high(v));
            }
        }
        Ok(Scenario {
            program,
            partition,
            init,
            sites: domains.into_iter().collect(),
        })
    }

    /// Secret sites and their domains, in site order.
    pub fn sites(&self) -> &[(SecretSite, Vec<Value>)] {
        &self.sites
    }

    /// The initial configuration with secret sites set to `assignment`
    /// (one value per site, in site order).
    pub fn instantiate(&self, assignment: &[Value]) -> ArchConfig {
        assert_eq!(assignment.len(), self.sites.len(), "one value per secret site");
        let mut c = self.init.clone();
        for ((site, _), &v) in self.sites.iter().zip(assignment) {
            match site {
                SecretSite::Mem(a) => c.mem.set(*a, v),
                SecretSite::Reg(r) => c.set(*r, LabeledValue::high(v)),
            }
        }
        c
    }

    /// An assignment drawn uniformly from the domains.
    pub fn random_assignment(&self, rng: &mut impl Rng) -> Vec<Value> {
        self.sites
            .iter()
            .map(|(_, dom)| dom[rng.gen_range(0..dom.len())])
            .collect()
    }

    /// Names and values of an assignment, for reports.
    pub fn describe(&self, assignment: &[Value]) -> BTreeMap<String, Value> {
        self.sites
            .iter()
            .zip(assignment)
            .map(|((s, _), &v)| (s.name(&self.program), v))
            .collect()
    }

    /// The pairs of assignments a checker examines: every unordered pair of
    /// distinct assignments when there are at most
    /// [`EXHAUSTIVE_PAIR_LIMIT`] of them, otherwise `budget` pairs drawn
    /// independently with a generator seeded by `seed`.
    pub fn pair_plan(&self, budget: usize, seed: u64) -> PairPlan {
        let total: Option<usize> = self
            .sites
            .iter()
            .try_fold(1usize, |acc, (_, d)| acc.checked_mul(d.len()));
        let distinct_pairs = total.and_then(|t| t.checked_mul(t.saturating_sub(1)).map(|x| x / 2));
        match (total, distinct_pairs) {
            (Some(t), Some(pairs)) if pairs <= EXHAUSTIVE_PAIR_LIMIT => {
                let all: Vec<Vec<Value>> = (0..t).map(|i| self.nth_assignment(i)).collect();
                let mut out = Vec::with_capacity(pairs.max(1));
                for i in 0..t {
                    for j in i + 1..t {
                        out.push((all[i].clone(), all[j].clone()));
                    }
                }
                if out.is_empty() {
                    // A single possible assignment: the only pair is trivial.
                    out.push((all[0].clone(), all[0].clone()));
                }
                PairPlan {
                    pairs: out,
                    exhaustive: true,
                }
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pairs = (0..budget)
                    .map(|_| (self.random_assignment(&mut rng), self.random_assignment(&mut rng)))
                    .collect();
                PairPlan {
                    pairs,
                    exhaustive: false,
                }
            }
        }
    }

    /// The `i`-th assignment in mixed-radix order.
    fn nth_assignment(&self, mut i: usize) -> Vec<Value> {
        self.sites
            .iter()
            .map(|(_, d)| {
                let v = d[i % d.len()];
                i /= d.len();
                v
            })
            .collect()
    }
}

/// Pairs of secret assignments selected for a check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPlan {
    /// The pairs.
    pub pairs: Vec<(Vec<Value>, Vec<Value>)>,
    /// Whether the pairs cover every distinct pair.
    pub exhaustive: bool,
}

// ---------------------------------------------------------------------------
// Constant-time checkers
// ---------------------------------------------------------------------------

/// Verdict of a constant-time check. "Pass" means no counterexample was found
/// among the examined pairs within the step bound.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CtVerdict {
    /// No examined pair distinguishes the secrets.
    Pass {
        /// Number of pairs examined.
        pairs: usize,
        /// Whether every distinct pair was examined.
        exhaustive: bool,
        /// The step bound.
        bound: usize,
    },
    /// A pair of low-equivalent configurations is distinguished.
    Fail(CtCounterexample),
}

impl CtVerdict {
    /// Whether the verdict is a pass.
    pub fn is_pass(&self) -> bool {
        matches!(self, CtVerdict::Pass { .. })
    }
}

/// Two low-equivalent configurations with different sequential leakage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtCounterexample {
    /// Secret values of the first run.
    pub secrets_a: BTreeMap<String, Value>,
    /// Secret values of the second run.
    pub secrets_b: BTreeMap<String, Value>,
    /// Index of the first differing step.
    pub step: usize,
    /// Observation of the first run at that step (`None`: halted).
    pub obs_a: Option<Observation>,
    /// Observation of the second run at that step (`None`: halted).
    pub obs_b: Option<Observation>,
    /// What differs.
    pub reason: String,
}

impl fmt::Display for CtCounterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {}: {} ({:?} vs {:?}) for {:?} vs {:?}",
            self.step, self.reason, self.obs_a, self.obs_b, self.secrets_a, self.secrets_b
        )
    }
}

fn as_obs(s: ArchStep) -> (Option<Observation>, Option<Value>) {
    match s {
        ArchStep::Halt => (None, None),
        ArchStep::Step { obs, decl } => (Some(obs), decl),
    }
}

/// Checks that observation and declassification traces are independent of
/// the secrets (constant-time, with no declassification) for `n` steps.
pub fn check_constant_time(scenario: &Scenario, n: usize, budget: usize, seed: u64) -> CtVerdict {
    let plan = scenario.pair_plan(budget, seed);
    let (p, part) = (&*scenario.program, &scenario.partition);
    for (sa, sb) in &plan.pairs {
        let mut a = scenario.instantiate(sa);
        let mut b = scenario.instantiate(sb);
        for step in 0..n {
            let (oa, da) = as_obs(arch_step(p, part, &mut a));
            let (ob, db) = as_obs(arch_step(p, part, &mut b));
            let reason = if oa != ob {
                Some("observations differ".to_string())
            } else if da != db {
                Some(format!("declassified values differ ({da:?} vs {db:?})"))
            } else {
                None
            };
            if let Some(reason) = reason {
                return CtVerdict::Fail(CtCounterexample {
                    secrets_a: scenario.describe(sa),
                    secrets_b: scenario.describe(sb),
                    step,
                    obs_a: oa,
                    obs_b: ob,
                    reason,
                });
            }
            if oa.is_none() {
                break;
            }
        }
    }
    CtVerdict::Pass {
        pairs: plan.pairs.len(),
        exhaustive: plan.exhaustive,
        bound: n,
    }
}

/// Checks constant-time up to declassification: the first configuration runs
/// normally and produces `δ`; the second runs patched with `δ`. Observations
/// must agree at every step and the second run must consume `δ` exactly.
pub fn check_ct_up_to_decl(scenario: &Scenario, n: usize, budget: usize, seed: u64) -> CtVerdict {
    let plan = scenario.pair_plan(budget, seed);
    let (p, part) = (&*scenario.program, &scenario.partition);
    // Both orientations matter: the definition quantifies over ordered pairs.
    let ordered = plan
        .pairs
        .iter()
        .flat_map(|(a, b)| [(a, b), (b, a)]);
    for (sa, sb) in ordered {
        let fail = |step: usize, oa, ob, reason: String| {
            CtVerdict::Fail(CtCounterexample {
                secrets_a: scenario.describe(sa),
                secrets_b: scenario.describe(sb),
                step,
                obs_a: oa,
                obs_b: ob,
                reason,
            })
        };
        let run_a = arch_run(p, part, &scenario.instantiate(sa), n);
        let mut delta = run_a.decl.clone();
        let mut b = scenario.instantiate(sb);
        for step in 0..n {
            let oa = run_a.obs.get(step).copied();
            let ob = match arch_step_patched(p, part, &mut b, &mut delta) {
                Ok(s) => as_obs(s).0,
                Err(e) => return fail(step, oa, None, e.to_string()),
            };
            if oa != ob {
                return fail(step, oa, ob, "observations differ".to_string());
            }
            if ob.is_none() {
                break;
            }
        }
        if !delta.is_empty() {
            return fail(
                run_a.obs.len().min(n),
                None,
                None,
                format!("{} declassified value(s) left unconsumed", delta.len()),
            );
        }
    }
    CtVerdict::Pass {
        pairs: plan.pairs.len(),
        exhaustive: plan.exhaustive,
        bound: n,
    }
}
