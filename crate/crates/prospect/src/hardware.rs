//! The speculative out-of-order semantics with hardware secrecy tracking.
//!
//! A [`HardwareConfig`] is `⟨m, r, buf, μ⟩`: committed memory and registers,
//! a reorder buffer of in-flight [`RobEntry`]s, and the attacker's
//! [`MicroContext`]. Every [`hw_step`] first lets `μ` absorb the low
//! projections of the whole configuration, then asks it for a [`Directive`]
//! and applies the single rule whose premises hold (or stalls).
//!
//! The secrecy mechanism rests on two choices. First, during speculation
//! (some entry of the buffer prefix carries a prediction tag) operands that
//! decide control flow or memory addresses are read through [`aplsan`], which
//! hides secret-labeled values, so they cannot reach `μ`. Second, a load whose
//! address is secret always rolls back, even when the predicted value was
//! right, so commit/rollback timing reveals nothing.
//!
//! The invariant monitors at the end of the module check the structural
//! lemmas of the model at run time: `pc` is always public, the buffer is
//! well-formed, sanitized operands carry no secrets under speculation, and
//! on non-transient states the pending buffer effects agree with the
//! architecturally correct ones.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, DeclassTrace, DeclassUnderflow, Memory};
use crate::isa::{
    eval_expr, BinOp, Expr, Instruction, LabeledValue, Loc, MaybeValue, Program, Reg,
    RegisterTable, SecLevel, SecretPartition, Value,
};
use crate::microctx::{Directive, MicroContext, MicroEvent, PredictSite, StrategySpec};

/// A prediction tag: the location of the instruction whose prediction an
/// entry is waiting on, or `ε` once resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    /// Resolved / not speculative.
    Eps,
    /// Pending prediction made at this location.
    Loc(Loc),
}

/// A reorder-buffer entry.
///
/// Fetching `x <- e`, `x <- load e` or `store e, e'` appends the instruction
/// followed by a `pc` increment entry (`pc_incr`); fetching a branch or jump
/// appends a single tagged assignment of the predicted target to `pc`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum RobEntry<V = LabeledValue> {
    /// `dst <- expr @ tag`; resolved once `expr` is a literal.
    Mov {
        /// Destination (may be `pc`).
        dst: Reg,
        /// The (possibly unresolved) expression.
        expr: Expr<V>,
        /// Prediction tag.
        tag: Tag,
        /// Whether this is the `pc <-+ l` increment following an instruction.
        pc_incr: bool,
    },
    /// `dst <- load addr @ tag`, not yet executed.
    Load {
        /// Destination register.
        dst: Reg,
        /// Address expression.
        addr: Expr<V>,
        /// Prediction tag.
        tag: Tag,
    },
    /// `store addr, val @ tag`; resolved once both operands are literals.
    Store {
        /// Address expression.
        addr: Expr<V>,
        /// Value expression.
        val: Expr<V>,
        /// Prediction tag.
        tag: Tag,
    },
}

/// A low-projected reorder-buffer entry: secret literals replaced by `⊥`.
pub type LowRobEntry = RobEntry<MaybeValue>;

impl<V> RobEntry<V> {
    /// The entry's prediction tag.
    #[inline]
    pub fn tag(&self) -> Tag {
        match self {
            RobEntry::Mov { tag, .. } | RobEntry::Load { tag, .. } | RobEntry::Store { tag, .. } => {
                *tag
            }
        }
    }

    /// Whether this is a `pc` increment entry.
    #[inline]
    pub fn is_pc_incr(&self) -> bool {
        matches!(self, RobEntry::Mov { pc_incr: true, .. })
    }

    fn map_values<W>(&self, f: &dyn Fn(&V) -> W) -> RobEntry<W> {
        match self {
            RobEntry::Mov {
                dst,
                expr,
                tag,
                pc_incr,
            } => RobEntry::Mov {
                dst: *dst,
                expr: expr.map_values(f),
                tag: *tag,
                pc_incr: *pc_incr,
            },
            RobEntry::Load { dst, addr, tag } => RobEntry::Load {
                dst: *dst,
                addr: addr.map_values(f),
                tag: *tag,
            },
            RobEntry::Store { addr, val, tag } => RobEntry::Store {
                addr: addr.map_values(f),
                val: val.map_values(f),
                tag: *tag,
            },
        }
    }
}

impl<V: crate::isa::LiteralFmt> RobEntry<V> {
    /// Renders the entry, e.g. `x <- 5 @ ε` or `pc <-+ 3 @ ε`.
    pub fn to_source(&self, regs: &RegisterTable) -> String {
        let tag = |t: &Tag| match t {
            Tag::Eps => "ε".to_string(),
            Tag::Loc(l) => l.to_string(),
        };
        match self {
            RobEntry::Mov {
                dst,
                expr,
                tag: t,
                pc_incr,
            } => format!(
                "{} {} {} @ {}",
                regs.name(*dst),
                if *pc_incr { "<-+" } else { "<-" },
                expr.display(regs),
                tag(t)
            ),
            RobEntry::Load { dst, addr, tag: t } => {
                format!("{} <- load {} @ {}", regs.name(*dst), addr.display(regs), tag(t))
            }
            RobEntry::Store { addr, val, tag: t } => format!(
                "store {}, {} @ {}",
                addr.display(regs),
                val.display(regs),
                tag(t)
            ),
        }
    }
}

/// The reorder buffer: entries oldest first.
pub type ReorderBuffer = Vec<RobEntry>;

/// Which rule set the machine implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Secrecy-tracking semantics.
    #[default]
    #[serde(alias = "prospect")]
    Prospect,
    /// Deliberately weakened semantics used as a falsification target: no
    /// operand sanitization, loads of secret memory may commit, and loads may
    /// read memory past older pending stores.
    #[serde(alias = "insecure")]
    InsecureBaseline,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Prospect => f.write_str("prospect"),
            Mode::InsecureBaseline => f.write_str("insecure-baseline"),
        }
    }
}

/// Static parameters of a simulated machine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HwParams {
    /// Rule set.
    #[serde(default)]
    pub mode: Mode,
    /// Maximum number of buffer entries; fetch stalls when full.
    #[serde(default)]
    pub rob_capacity: Option<usize>,
    /// Operators whose execution time depends on their operands; assignments
    /// using them read operands through [`aplsan`].
    #[serde(default)]
    pub variable_time: BTreeSet<BinOp>,
    /// Whether [`hw_step`] evaluates the invariant monitors.
    #[serde(default = "default_true")]
    pub monitors: bool,
}

fn default_true() -> bool {
    true
}

impl Default for HwParams {
    fn default() -> Self {
        HwParams {
            mode: Mode::Prospect,
            rob_capacity: None,
            variable_time: BTreeSet::new(),
            monitors: true,
        }
    }
}

impl HwParams {
    /// Default parameters in the given mode.
    pub fn mode(mode: Mode) -> Self {
        HwParams {
            mode,
            ..HwParams::default()
        }
    }
}

/// The immutable parts of a simulation: program, partition, parameters.
#[derive(Clone, Debug)]
pub struct Machine {
    /// The program.
    pub program: Arc<Program>,
    /// The memory partition `ξ`.
    pub partition: SecretPartition,
    /// Parameters.
    pub params: HwParams,
}

impl Machine {
    /// A machine.
    pub fn new(program: Arc<Program>, partition: SecretPartition, params: HwParams) -> Arc<Machine> {
        Arc::new(Machine {
            program,
            partition,
            params,
        })
    }
}

/// A hardware configuration `⟨m, r, buf, μ⟩`.
#[derive(Clone, Debug)]
pub struct HardwareConfig {
    /// Program, partition and parameters.
    pub machine: Arc<Machine>,
    /// Committed memory.
    pub mem: Memory,
    /// Committed registers, indexed by register.
    pub reg: Vec<LabeledValue>,
    /// The reorder buffer.
    pub buf: ReorderBuffer,
    /// The microarchitectural context.
    pub mu: MicroContext,
}

impl HardwareConfig {
    /// The initial configuration: committed state `init`, empty buffer and a
    /// fresh context for `strategy`.
    pub fn initial(machine: Arc<Machine>, init: &ArchConfig, strategy: StrategySpec) -> Self {
        HardwareConfig {
            machine,
            mem: init.mem.clone(),
            reg: init.reg.clone(),
            buf: Vec::new(),
            mu: MicroContext::new(strategy),
        }
    }

    /// The committed architectural configuration.
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            mem: self.mem.clone(),
            reg: self.reg.clone(),
        }
    }

    /// The committed program counter.
    pub fn pc(&self) -> Value {
        self.reg[Reg::PC.index()].value
    }

    /// Whether the machine has drained: empty buffer and no instruction at
    /// `pc`.
    pub fn is_quiescent(&self) -> bool {
        self.buf.is_empty() && self.machine.program.get(self.pc()).is_none()
    }

    /// Renders the buffer, one entry per line.
    pub fn buffer_listing(&self) -> String {
        let regs = self.machine.program.registers();
        self.buf
            .iter()
            .enumerate()
            .map(|(i, e)| format!("{i:>3}: {}\n", e.to_source(regs)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Projections and apply functions
// ---------------------------------------------------------------------------

/// `⌊v⌋`: public values are kept, secret and undefined values become `⊥`.
#[inline]
pub fn low_proj_value(v: MaybeValue) -> MaybeValue {
    v.filter(|v| v.level == SecLevel::L)
}

/// The low projection of a memory: public addresses keep their contents,
/// secret addresses read as `⊥`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LowMemory {
    partition: SecretPartition,
    /// Non-zero public cells, in address order.
    cells: Vec<(Value, Value)>,
}

impl LowMemory {
    /// The projected contents of address `a`.
    pub fn get(&self, a: Value) -> MaybeValue {
        if self.partition.level(a) == SecLevel::H {
            return None;
        }
        let v = self
            .cells
            .binary_search_by_key(&a, |&(x, _)| x)
            .map_or(0, |i| self.cells[i].1);
        Some(LabeledValue::low(v))
    }

    /// The non-zero public cells.
    pub fn cells(&self) -> &[(Value, Value)] {
        &self.cells
    }
}

fn public_cells(m: &Memory, part: &SecretPartition) -> Vec<(Value, Value)> {
    m.iter().filter(|&(a, _)| part.level(a) == SecLevel::L).collect()
}

/// `⌊m⌋`: the low projection of memory under `part`.
pub fn low_proj_mem(m: &Memory, part: &SecretPartition) -> LowMemory {
    LowMemory {
        partition: part.clone(),
        cells: public_cells(m, part),
    }
}

/// `⌊r⌋`: the low projection of a register map.
pub fn low_proj_reg(reg: &[MaybeValue]) -> Vec<MaybeValue> {
    reg.iter().map(|v| low_proj_value(*v)).collect()
}

/// `⌊buf⌋`: the low projection of a reorder buffer. Structure, tags,
/// registers and operators are kept; only secret literals become `⊥`.
pub fn low_proj_buf(buf: &[RobEntry]) -> Vec<LowRobEntry> {
    buf.iter()
        .map(|e| e.map_values(&|v: &LabeledValue| low_proj_value(Some(*v))))
        .collect()
}

/// `apl(buf, r)`: the register map after applying the buffer's pending
/// effects. Resolved assignments write their value, unresolved assignments
/// and loads write `⊥`, stores are skipped.
pub fn apl(buf: &[RobEntry], reg: &[LabeledValue]) -> Vec<MaybeValue> {
    let mut out: Vec<MaybeValue> = reg.iter().map(|v| Some(*v)).collect();
    for e in buf {
        match e {
            RobEntry::Mov { dst, expr, .. } => out[dst.index()] = expr.as_value(),
            RobEntry::Load { dst, .. } => out[dst.index()] = None,
            RobEntry::Store { .. } => {}
        }
    }
    out
}

/// Whether any entry carries a prediction tag.
#[inline]
pub fn is_speculating(buf: &[RobEntry]) -> bool {
    buf.iter().any(|e| e.tag() != Tag::Eps)
}

/// `aplsan(buf, r)`: [`apl`] when no entry carries a prediction tag, its low
/// projection otherwise.
pub fn aplsan(buf: &[RobEntry], reg: &[LabeledValue]) -> Vec<MaybeValue> {
    let mut out = apl(buf, reg);
    if is_speculating(buf) {
        for v in &mut out {
            *v = low_proj_value(*v);
        }
    }
    out
}

/// The speculative program counter: `apl(buf, r)(pc)`.
pub fn speculative_pc(buf: &[RobEntry], reg: &[LabeledValue]) -> MaybeValue {
    for e in buf.iter().rev() {
        if let RobEntry::Mov { dst: Reg::PC, expr, .. } = e {
            return expr.as_value();
        }
    }
    Some(reg[Reg::PC.index()])
}

/// The per-step input of `μ`'s update: the low projections of memory,
/// registers and buffer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LowSnapshot {
    /// Non-zero public memory cells, in address order.
    pub mem: Vec<(Value, Value)>,
    /// Projected committed registers.
    pub reg: Vec<MaybeValue>,
    /// Projected buffer.
    pub buf: Vec<LowRobEntry>,
}

impl LowSnapshot {
    /// Projects a configuration.
    pub fn capture(mem: &Memory, reg: &[LabeledValue], buf: &[RobEntry], part: &SecretPartition) -> Self {
        LowSnapshot {
            mem: public_cells(mem, part),
            reg: reg.iter().map(|v| low_proj_value(Some(*v))).collect(),
            buf: low_proj_buf(buf),
        }
    }

    /// Whether every defined value in the snapshot is public.
    pub fn is_low(&self) -> bool {
        let low_expr = |e: &Expr<MaybeValue>| expr_literals(e).all(|v| v.map_or(true, |v| v.is_low()));
        self.reg.iter().all(|v| v.map_or(true, |v| v.is_low()))
            && self.buf.iter().all(|e| match e {
                RobEntry::Mov { expr, .. } => low_expr(expr),
                RobEntry::Load { addr, .. } => low_expr(addr),
                RobEntry::Store { addr, val, .. } => low_expr(addr) && low_expr(val),
            })
    }

    /// Every public value mentioned in the snapshot (memory contents,
    /// registers, buffer literals).
    pub fn public_values(&self) -> Vec<Value> {
        let mut out: Vec<Value> = self.mem.iter().map(|&(_, v)| v).collect();
        out.extend(self.reg.iter().flatten().map(|v| v.value));
        for e in &self.buf {
            let exprs: [Option<&Expr<MaybeValue>>; 2] = match e {
                RobEntry::Mov { expr, .. } => [Some(expr), None],
                RobEntry::Load { addr, .. } => [Some(addr), None],
                RobEntry::Store { addr, val, .. } => [Some(addr), Some(val)],
            };
            for x in exprs.into_iter().flatten() {
                out.extend(expr_literals(x).flatten().map(|v| v.value));
            }
        }
        out
    }

    /// Rough heap footprint, used for the retention budget.
    pub fn approx_bytes(&self) -> usize {
        16 * self.mem.len() + 24 * self.reg.len() + 64 * self.buf.len() + 64
    }

    /// The canonical serialization: equal snapshots, and only equal
    /// snapshots, have equal bytes.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.approx_bytes());
        let u64le = |out: &mut Vec<u8>, x: u64| out.extend_from_slice(&x.to_le_bytes());
        u64le(&mut out, self.mem.len() as u64);
        for &(a, v) in &self.mem {
            u64le(&mut out, a);
            u64le(&mut out, v);
        }
        u64le(&mut out, self.reg.len() as u64);
        for v in &self.reg {
            write_maybe(&mut out, *v);
        }
        u64le(&mut out, self.buf.len() as u64);
        for e in &self.buf {
            match e {
                RobEntry::Mov {
                    dst,
                    expr,
                    tag,
                    pc_incr,
                } => {
                    out.push(if *pc_incr { 1 } else { 0 });
                    out.extend_from_slice(&dst.0.to_le_bytes());
                    write_expr(&mut out, expr);
                    write_tag(&mut out, *tag);
                }
                RobEntry::Load { dst, addr, tag } => {
                    out.push(2);
                    out.extend_from_slice(&dst.0.to_le_bytes());
                    write_expr(&mut out, addr);
                    write_tag(&mut out, *tag);
                }
                RobEntry::Store { addr, val, tag } => {
                    out.push(3);
                    write_expr(&mut out, addr);
                    write_expr(&mut out, val);
                    write_tag(&mut out, *tag);
                }
            }
        }
        out
    }
}

fn expr_literals<V: Copy>(e: &Expr<V>) -> impl Iterator<Item = V> {
    fn walk<V: Copy>(e: &Expr<V>, out: &mut Vec<V>) {
        match e {
            Expr::Val(v) => out.push(*v),
            Expr::Reg(_) => {}
            Expr::Bin(_, a, b) => {
                walk(a, out);
                walk(b, out);
            }
        }
    }
    let mut out = Vec::new();
    walk(e, &mut out);
    out.into_iter()
}

fn write_maybe(out: &mut Vec<u8>, v: MaybeValue) {
    match v {
        None => out.push(0),
        Some(v) => {
            out.push(if v.level == SecLevel::L { 1 } else { 2 });
            out.extend_from_slice(&v.value.to_le_bytes());
        }
    }
}

fn write_expr(out: &mut Vec<u8>, e: &Expr<MaybeValue>) {
    match e {
        Expr::Val(v) => {
            out.push(0);
            write_maybe(out, *v);
        }
        Expr::Reg(r) => {
            out.push(1);
            out.extend_from_slice(&r.0.to_le_bytes());
        }
        Expr::Bin(op, a, b) => {
            out.push(2);
            out.push(*op as u8);
            write_expr(out, a);
            write_expr(out, b);
        }
    }
}

fn write_tag(out: &mut Vec<u8>, t: Tag) {
    match t {
        Tag::Eps => out.push(0),
        Tag::Loc(l) => {
            out.push(1);
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
}

// ---------------------------------------------------------------------------
// Rules
// ---------------------------------------------------------------------------

/// The rule a step applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// Fetch a branch or jump: append `pc <- predicted @ l`.
    FetchPredictBranchJmp,
    /// Fetch any other instruction: append it and a `pc` increment.
    FetchOthers,
    /// A branch prediction turned out right.
    ExecuteBranchCommit,
    /// A branch prediction turned out wrong: younger entries are dropped.
    ExecuteBranchRollback,
    /// A jump prediction turned out right.
    ExecuteJmpCommit,
    /// A jump prediction turned out wrong: younger entries are dropped.
    ExecuteJmpRollback,
    /// Evaluate an assignment.
    ExecuteAssign,
    /// Predict the value of a load.
    ExecuteLoadPredict,
    /// A load-value prediction is confirmed (public address, right value).
    ExecuteLoadCommit,
    /// A load-value prediction is discarded (wrong value or secret address).
    ExecuteLoadRollback,
    /// Evaluate a store's address and value.
    ExecuteStore,
    /// Retire an assignment at the head of the buffer.
    RetireAssign,
    /// Retire a store to public memory (declassifies the value).
    RetireStoreLow,
    /// Retire a store to secret memory.
    RetireStoreHigh,
    /// Insecure baseline only: a load reads memory while older stores are
    /// still pending, keeping its prediction tag; younger entries are dropped
    /// if the value changes.
    ExecuteLoadBypass,
}

impl Rule {
    /// The rule's kebab-case name.
    pub fn name(self) -> &'static str {
        match self {
            Rule::FetchPredictBranchJmp => "fetch-predict-branch-jmp",
            Rule::FetchOthers => "fetch-others",
            Rule::ExecuteBranchCommit => "execute-branch-commit",
            Rule::ExecuteBranchRollback => "execute-branch-rollback",
            Rule::ExecuteJmpCommit => "execute-jmp-commit",
            Rule::ExecuteJmpRollback => "execute-jmp-rollback",
            Rule::ExecuteAssign => "execute-assign",
            Rule::ExecuteLoadPredict => "execute-load-predict",
            Rule::ExecuteLoadCommit => "execute-load-commit",
            Rule::ExecuteLoadRollback => "execute-load-rollback",
            Rule::ExecuteStore => "execute-store",
            Rule::RetireAssign => "retire-assign",
            Rule::RetireStoreLow => "retire-store-low",
            Rule::RetireStoreHigh => "retire-store-high",
            Rule::ExecuteLoadBypass => "execute-load-bypass",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The architectural effect of a retirement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effect {
    /// A register (possibly `pc`) received a value.
    Reg {
        /// The register.
        reg: Reg,
        /// The value written.
        value: LabeledValue,
    },
    /// A memory cell received a value.
    Mem {
        /// The address.
        addr: Value,
        /// The value written.
        value: Value,
    },
}

/// Which monitored invariant a [`Violation`] breaks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Monitor {
    /// `pc` and every buffered `pc` assignment are public.
    PcLow,
    /// The buffer is well-formed.
    WellFormed,
    /// Under speculation, sanitized operands carry no secret labels.
    SanitizedSpeculation,
    /// On non-transient states, pending effects agree with the deep update.
    AplAgreement,
    /// Addresses leaked to `μ` during speculation are public.
    LeakLevel,
}

/// A broken invariant.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    /// The invariant.
    pub monitor: Monitor,
    /// What was observed.
    pub detail: String,
}

/// The outcome of one [`hw_step`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepResult {
    /// The directive `μ` chose.
    pub directive: Directive,
    /// The rule applied, or `None` if the step stalled.
    pub rule: Option<Rule>,
    /// The value declassified by a store retiring to public memory (in a
    /// patched run: the value the store would have written).
    pub decl: Option<Value>,
    /// In a patched run, the declassification-trace value written instead.
    pub patched: Option<Value>,
    /// The architectural effect of a retirement.
    pub retired: Option<Effect>,
    /// Rule-level events appended to `μ` this step (after the preamble).
    pub leaks: Vec<MicroEvent>,
    /// Invariant violations detected after the step (monitors enabled only).
    pub violations: Vec<Violation>,
}

impl StepResult {
    /// Whether no rule applied.
    pub fn stalled(&self) -> bool {
        self.rule.is_none()
    }
}

/// What a rule did, before monitors and bookkeeping.
#[derive(Default)]
struct Fired {
    rule: Option<Rule>,
    decl: Option<Value>,
    patched: Option<Value>,
    retired: Option<Effect>,
    /// Level of each address leaked while the buffer prefix was speculating.
    speculative_leaks: Vec<LabeledValue>,
}

impl Fired {
    fn rule(rule: Rule) -> Fired {
        Fired {
            rule: Some(rule),
            ..Fired::default()
        }
    }
}

/// One step of the speculative semantics.
pub fn hw_step(h: &mut HardwareConfig) -> StepResult {
    step(h, None).expect("unpatched steps never consume a declassification trace")
}

/// One step of the patched speculative semantics: stores retiring to public
/// memory write the head of `delta` (consuming it).
pub fn hw_step_patched(
    h: &mut HardwareConfig,
    delta: &mut DeclassTrace,
) -> Result<StepResult, DeclassUnderflow> {
    step(h, Some(delta))
}

fn step(h: &mut HardwareConfig, patch: Option<&mut DeclassTrace>) -> Result<StepResult, DeclassUnderflow> {
    let machine = Arc::clone(&h.machine);
    let snap = LowSnapshot::capture(&h.mem, &h.reg, &h.buf, &machine.partition);
    h.mu.update(snap);
    let mark = h.mu.log().len();
    let directive = h.mu.next();
    let fired = match directive {
        Directive::Fetch => fetch(h, &machine),
        Directive::Execute(i) => execute(h, &machine, i),
        Directive::Retire => retire(h, &machine, patch)?,
    };
    let leaks = h.mu.log()[mark..].to_vec();
    let mut violations = Vec::new();
    if machine.params.monitors && machine.params.mode == Mode::Prospect {
        for a in &fired.speculative_leaks {
            if a.level != SecLevel::L {
                violations.push(Violation {
                    monitor: Monitor::LeakLevel,
                    detail: format!("secret-labeled address {a} leaked during speculation"),
                });
            }
        }
        violations.extend(check_invariants(h));
    }
    Ok(StepResult {
        directive,
        rule: fired.rule,
        decl: fired.decl,
        patched: fired.patched,
        retired: fired.retired,
        leaks,
        violations,
    })
}

fn fetch(h: &mut HardwareConfig, m: &Machine) -> Fired {
    if m.params.rob_capacity.is_some_and(|cap| h.buf.len() + 2 > cap) {
        return Fired::default();
    }
    let Some(pc) = speculative_pc(&h.buf, &h.reg) else {
        return Fired::default();
    };
    let l = pc.value;
    let Some(ins) = m.program.get(l) else {
        return Fired::default();
    };
    let incr = RobEntry::Mov {
        dst: Reg::PC,
        expr: Expr::lit(l.wrapping_add(1)),
        tag: Tag::Eps,
        pc_incr: true,
    };
    let site = match ins {
        Instruction::Beqz(_, target) => Some(PredictSite::Branch { at: l, target: *target }),
        Instruction::Jmp(_) => Some(PredictSite::Jump {
            at: l,
            program_len: m.program.len(),
        }),
        _ => None,
    };
    if let Some(site) = site {
        let predicted = h.mu.predict(site);
        h.buf.push(RobEntry::Mov {
            dst: Reg::PC,
            expr: Expr::lit(predicted),
            tag: Tag::Loc(l),
            pc_incr: false,
        });
        h.mu.leak(MicroEvent::LeakPredTag(l));
        return Fired::rule(Rule::FetchPredictBranchJmp);
    }
    let entry = match ins {
        Instruction::Mov(x, e) => RobEntry::Mov {
            dst: *x,
            expr: e.clone(),
            tag: Tag::Eps,
            pc_incr: false,
        },
        Instruction::Load(x, e) => RobEntry::Load {
            dst: *x,
            addr: e.clone(),
            tag: Tag::Eps,
        },
        Instruction::Store(a, v) => RobEntry::Store {
            addr: a.clone(),
            val: v.clone(),
            tag: Tag::Eps,
        },
        Instruction::Beqz(..) | Instruction::Jmp(..) => unreachable!("handled above"),
    };
    h.buf.push(entry);
    h.buf.push(incr);
    Fired::rule(Rule::FetchOthers)
}

/// Register map used for operands that may reach `μ`: [`aplsan`], or [`apl`]
/// in the insecure baseline.
fn guarded(m: &Machine, prefix: &[RobEntry], reg: &[LabeledValue]) -> Vec<MaybeValue> {
    match m.params.mode {
        Mode::Prospect => aplsan(prefix, reg),
        Mode::InsecureBaseline => apl(prefix, reg),
    }
}

fn execute(h: &mut HardwareConfig, m: &Machine, i: usize) -> Fired {
    let Some(entry) = h.buf.get(i) else {
        return Fired::default();
    };
    let prefix = &h.buf[..i];
    match entry {
        // Resolve a branch or jump prediction.
        RobEntry::Mov {
            dst: Reg::PC,
            expr: Expr::Val(predicted),
            tag: Tag::Loc(l0),
            ..
        } => {
            let (l0, predicted) = (*l0, predicted.value);
            let regs = guarded(m, prefix, &h.reg);
            let (actual, commit_rule, rollback_rule) = match m.program.get(l0) {
                Some(Instruction::Beqz(e, target)) => {
                    let Some(c) = eval_expr(e, &regs) else {
                        return Fired::default();
                    };
                    let next = if c.value == 0 { *target } else { l0.wrapping_add(1) };
                    (next, Rule::ExecuteBranchCommit, Rule::ExecuteBranchRollback)
                }
                Some(Instruction::Jmp(e)) => {
                    let Some(t) = eval_expr(e, &regs) else {
                        return Fired::default();
                    };
                    (t.value, Rule::ExecuteJmpCommit, Rule::ExecuteJmpRollback)
                }
                _ => return Fired::default(),
            };
            if actual == predicted {
                if let RobEntry::Mov { tag, .. } = &mut h.buf[i] {
                    *tag = Tag::Eps;
                }
                Fired::rule(commit_rule)
            } else {
                h.buf.truncate(i);
                h.buf.push(RobEntry::Mov {
                    dst: Reg::PC,
                    expr: Expr::lit(actual),
                    tag: Tag::Eps,
                    pc_incr: false,
                });
                Fired::rule(rollback_rule)
            }
        }
        // Resolve a load-value prediction.
        RobEntry::Mov {
            dst,
            expr: Expr::Val(predicted),
            tag: Tag::Loc(l0),
            ..
        } => {
            let (dst, l0, predicted) = (*dst, *l0, *predicted);
            let Some(Instruction::Load(x, addr)) = m.program.get(l0) else {
                return Fired::default();
            };
            if *x != dst {
                return Fired::default();
            }
            let speculating = is_speculating(prefix);
            let pending_store = prefix.iter().any(|e| matches!(e, RobEntry::Store { .. }));
            if pending_store {
                if m.params.mode != Mode::InsecureBaseline {
                    return Fired::default();
                }
                let Some(a) = eval_expr(addr, &apl(prefix, &h.reg)) else {
                    return Fired::default();
                };
                let loaded = LabeledValue::new(h.mem.get(a.value), m.partition.level(a.value));
                if let RobEntry::Mov { expr, .. } = &mut h.buf[i] {
                    *expr = Expr::Val(loaded);
                }
                // Younger entries may have consumed the previous value: drop
                // them (keeping the load's pc increment), as a rollback would.
                if loaded != predicted {
                    let keep = if h.buf.get(i + 1).is_some_and(RobEntry::is_pc_incr) {
                        i + 2
                    } else {
                        i + 1
                    };
                    h.buf.truncate(keep);
                }
                h.mu.leak(MicroEvent::LeakAddr(a.value));
                return Fired::rule(Rule::ExecuteLoadBypass);
            }
            let Some(a) = eval_expr(addr, &guarded(m, prefix, &h.reg)) else {
                return Fired::default();
            };
            let level = m.partition.level(a.value);
            let loaded = LabeledValue::new(h.mem.get(a.value), level);
            let public_ok = level == SecLevel::L || m.params.mode == Mode::InsecureBaseline;
            let commit = public_ok && loaded.value == predicted.value;
            h.buf[i] = RobEntry::Mov {
                dst,
                expr: Expr::Val(loaded),
                tag: Tag::Eps,
                pc_incr: false,
            };
            if !commit {
                let keep = if h.buf.get(i + 1).is_some_and(RobEntry::is_pc_incr) {
                    i + 2
                } else {
                    i + 1
                };
                h.buf.truncate(keep);
            }
            h.mu.leak(MicroEvent::LeakAddr(a.value));
            let mut fired = Fired::rule(if commit {
                Rule::ExecuteLoadCommit
            } else {
                Rule::ExecuteLoadRollback
            });
            if speculating {
                fired.speculative_leaks.push(a);
            }
            fired
        }
        // Evaluate an assignment.
        RobEntry::Mov {
            expr, tag: Tag::Eps, ..
        } if expr.as_value().is_none() => {
            let vt = &m.params.variable_time;
            let regs = if !vt.is_empty() && expr.any_op(&|op| vt.contains(&op)) {
                guarded(m, prefix, &h.reg)
            } else {
                apl(prefix, &h.reg)
            };
            let Some(v) = eval_expr(expr, &regs) else {
                return Fired::default();
            };
            if let RobEntry::Mov { expr, .. } = &mut h.buf[i] {
                *expr = Expr::Val(v);
            }
            Fired::rule(Rule::ExecuteAssign)
        }
        // Predict a load's value.
        RobEntry::Load { dst, .. } => {
            let dst = *dst;
            let Some(at) = speculative_pc(prefix, &h.reg) else {
                return Fired::default();
            };
            let predicted = h.mu.predict(PredictSite::LoadValue { at: at.value });
            h.buf[i] = RobEntry::Mov {
                dst,
                expr: Expr::lit(predicted),
                tag: Tag::Loc(at.value),
                pc_incr: false,
            };
            h.mu.leak(MicroEvent::LeakPredValue(predicted));
            Fired::rule(Rule::ExecuteLoadPredict)
        }
        // Evaluate a store's operands.
        RobEntry::Store {
            addr,
            val,
            tag: Tag::Eps,
        } if addr.as_value().is_none() || val.as_value().is_none() => {
            let Some(a) = eval_expr(addr, &guarded(m, prefix, &h.reg)) else {
                return Fired::default();
            };
            let Some(v) = eval_expr(val, &apl(prefix, &h.reg)) else {
                return Fired::default();
            };
            h.buf[i] = RobEntry::Store {
                addr: Expr::lit(a.value),
                val: Expr::Val(v),
                tag: Tag::Eps,
            };
            Fired::rule(Rule::ExecuteStore)
        }
        _ => Fired::default(),
    }
}

fn retire(
    h: &mut HardwareConfig,
    m: &Machine,
    patch: Option<&mut DeclassTrace>,
) -> Result<Fired, DeclassUnderflow> {
    match h.buf.first() {
        Some(RobEntry::Mov {
            dst,
            expr: Expr::Val(v),
            tag: Tag::Eps,
            ..
        }) => {
            let (dst, v) = (*dst, *v);
            h.reg[dst.index()] = v;
            h.buf.remove(0);
            let mut fired = Fired::rule(Rule::RetireAssign);
            fired.retired = Some(Effect::Reg { reg: dst, value: v });
            Ok(fired)
        }
        Some(RobEntry::Store {
            addr: Expr::Val(a),
            val: Expr::Val(v),
            tag: Tag::Eps,
        }) => {
            let (a, v) = (a.value, v.value);
            let public = m.partition.level(a) == SecLevel::L;
            let mut fired = Fired::rule(if public {
                Rule::RetireStoreLow
            } else {
                Rule::RetireStoreHigh
            });
            let written = match patch {
                Some(delta) if public => {
                    let w = delta.pop_front().ok_or(DeclassUnderflow { addr: a })?;
                    fired.patched = Some(w);
                    w
                }
                _ => v,
            };
            h.mem.set(a, written);
            h.buf.remove(0);
            h.mu.leak(MicroEvent::LeakAddr(a));
            fired.decl = public.then_some(v);
            fired.retired = Some(Effect::Mem {
                addr: a,
                value: written,
            });
            Ok(fired)
        }
        _ => Ok(Fired::default()),
    }
}

/// The result of [`hw_run`] or [`hw_run_patched`].
#[derive(Clone, Debug)]
pub struct HwRun {
    /// The final configuration.
    pub config: HardwareConfig,
    /// Declassified values (for a patched run: the unconsumed residual of the
    /// input trace).
    pub decl: DeclassTrace,
    /// One result per step.
    pub steps: Vec<StepResult>,
}

impl HwRun {
    /// All invariant violations, with their step index.
    pub fn violations(&self) -> impl Iterator<Item = (usize, &Violation)> {
        self.steps
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.violations.iter().map(move |v| (i, v)))
    }
}

/// Runs `n` steps.
pub fn hw_run(h0: &HardwareConfig, n: usize) -> HwRun {
    let mut h = h0.clone();
    let mut decl = DeclassTrace::new();
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let s = hw_step(&mut h);
        decl.extend(s.decl);
        steps.push(s);
    }
    HwRun {
        config: h,
        decl,
        steps,
    }
}

/// A patched run ran out of declassified values.
#[derive(Debug, Clone)]
pub struct PatchedRunError {
    /// Step at which the underflow happened.
    pub step: usize,
    /// The underflow.
    pub error: DeclassUnderflow,
    /// Results of the steps before it.
    pub steps: Vec<StepResult>,
}

/// Runs `n` patched steps seeded with `delta`.
pub fn hw_run_patched(
    h0: &HardwareConfig,
    mut delta: DeclassTrace,
    n: usize,
) -> Result<HwRun, Box<PatchedRunError>> {
    let mut h = h0.clone();
    let mut steps = Vec::with_capacity(n);
    for k in 0..n {
        match hw_step_patched(&mut h, &mut delta) {
            Ok(s) => steps.push(s),
            Err(error) => {
                return Err(Box::new(PatchedRunError {
                    step: k,
                    error,
                    steps,
                }))
            }
        }
    }
    Ok(HwRun {
        config: h,
        decl: delta,
        steps,
    })
}

/// One line of an exported step trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Step index.
    pub step: usize,
    /// Directive chosen by `μ`.
    pub directive: Directive,
    /// Rule name, or `stalled`.
    pub rule: String,
    /// Buffer length after the step.
    pub buf_size: usize,
    /// Committed `pc` after the step.
    pub pc: Value,
    /// Rule-level events appended to `μ`.
    pub leaks: Vec<String>,
    /// Declassified values.
    pub decl: Vec<Value>,
    /// Invariant violations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

impl TraceRecord {
    /// Builds the record of step `step`, given the configuration after it.
    pub fn new(step: usize, s: &StepResult, after: &HardwareConfig) -> Self {
        TraceRecord {
            step,
            directive: s.directive,
            rule: s.rule.map_or_else(|| "stalled".to_string(), |r| r.name().to_string()),
            buf_size: after.buf.len(),
            pc: after.pc(),
            leaks: s.leaks.iter().map(MicroEvent::summary).collect(),
            decl: s.decl.into_iter().collect(),
            violations: s.violations.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Deep update, transient states, well-formedness, monitors
// ---------------------------------------------------------------------------

/// Applies one entry's architecturally correct effect to `c`: predictions
/// are re-resolved against `c` rather than trusted.
fn deep_entry(
    p: &Program,
    part: &SecretPartition,
    c: &mut ArchConfig,
    e: &RobEntry,
    patch: Option<&mut DeclassTrace>,
) -> Result<(), DeclassUnderflow> {
    let load = |c: &mut ArchConfig, x: Reg, a: Value| {
        let v = LabeledValue::new(c.mem.get(a), part.level(a));
        c.set(x, v);
    };
    match e {
        RobEntry::Mov {
            dst,
            expr,
            tag: Tag::Eps,
            ..
        } => {
            let mut v = expr.eval_total(&c.reg);
            if *dst == Reg::PC {
                v.level = SecLevel::L;
            }
            c.set(*dst, v);
        }
        RobEntry::Mov {
            dst, tag: Tag::Loc(l), ..
        } => match p.get(*l) {
            Some(Instruction::Load(_, ea)) => {
                let a = ea.eval_total(&c.reg).value;
                load(c, *dst, a);
            }
            Some(Instruction::Jmp(e)) => {
                let t = e.eval_total(&c.reg).value;
                c.set(Reg::PC, LabeledValue::low(t));
            }
            Some(Instruction::Beqz(e, target)) => {
                let next = if e.eval_total(&c.reg).value == 0 {
                    *target
                } else {
                    l.wrapping_add(1)
                };
                c.set(Reg::PC, LabeledValue::low(next));
            }
            _ => {}
        },
        RobEntry::Load { dst, addr, .. } => {
            let a = addr.eval_total(&c.reg).value;
            load(c, *dst, a);
        }
        RobEntry::Store { addr, val, .. } => {
            let a = addr.eval_total(&c.reg).value;
            let v = val.eval_total(&c.reg).value;
            let written = match patch {
                Some(delta) if part.level(a) == SecLevel::L => {
                    delta.pop_front().ok_or(DeclassUnderflow { addr: a })?
                }
                _ => v,
            };
            c.mem.set(a, written);
        }
    }
    Ok(())
}

/// `a · buf`: the architectural configuration reached by resolving every
/// buffer entry correctly. In the patched variant (`delta` given), stores to
/// public memory write (and consume) the head of `delta`.
pub fn deep_update(
    p: &Program,
    part: &SecretPartition,
    a: &ArchConfig,
    buf: &[RobEntry],
    mut delta: Option<&mut DeclassTrace>,
) -> Result<ArchConfig, DeclassUnderflow> {
    let mut c = a.clone();
    for e in buf {
        deep_entry(p, part, &mut c, e, delta.as_deref_mut())?;
    }
    Ok(c)
}

/// Whether an entry's prediction (if any) is correct with respect to `c`.
/// A load-value prediction is only good for a public address.
pub fn goodpred(p: &Program, part: &SecretPartition, c: &ArchConfig, e: &RobEntry) -> bool {
    let RobEntry::Mov {
        dst,
        expr,
        tag: Tag::Loc(l),
        ..
    } = e
    else {
        return true;
    };
    let Some(v) = expr.as_value() else {
        return false;
    };
    match p.get(*l) {
        Some(Instruction::Beqz(cond, target)) if *dst == Reg::PC => {
            let next = if cond.eval_total(&c.reg).value == 0 {
                *target
            } else {
                l.wrapping_add(1)
            };
            next == v.value
        }
        Some(Instruction::Jmp(t)) if *dst == Reg::PC => t.eval_total(&c.reg).value == v.value,
        Some(Instruction::Load(_, ea)) => {
            let a = ea.eval_total(&c.reg).value;
            part.level(a) == SecLevel::L && c.mem.get(a) == v.value
        }
        _ => false,
    }
}

/// Whether the buffer contains an entry whose prediction is wrong with
/// respect to the deep update of the entries before it.
pub fn is_transient_buf(p: &Program, part: &SecretPartition, a: &ArchConfig, buf: &[RobEntry]) -> bool {
    let mut c = a.clone();
    for e in buf {
        if !goodpred(p, part, &c, e) {
            return true;
        }
        deep_entry(p, part, &mut c, e, None).expect("unpatched");
    }
    false
}

/// Whether a configuration is transient (some prediction in its buffer is
/// wrong).
pub fn is_transient(h: &HardwareConfig) -> bool {
    let m = &h.machine;
    is_transient_buf(&m.program, &m.partition, &h.arch(), &h.buf)
}

/// Result of the joint well-formedness / transient analysis.
struct Analysis {
    errors: Vec<String>,
    transient: bool,
    deep: ArchConfig,
}

/// Checks the well-formedness clauses of `buf` against the committed state
/// `a`, computing the deep update and transient status along the way.
///
/// Instruction entries are matched against the program at the buffer's own
/// speculative `pc` (which is where they were fetched from); checks that
/// compare resolved values with the architecturally correct ones apply only
/// to the non-transient prefix, since entries after a misprediction were
/// computed on a wrong path.
fn analyze(p: &Program, part: &SecretPartition, a: &ArchConfig, buf: &[RobEntry]) -> Analysis {
    let mut errors = Vec::new();
    let mut c = a.clone();
    let mut spc = a.pc();
    let mut transient = false;
    let regs = p.registers();
    for (i, e) in buf.iter().enumerate() {
        let mut err = |msg: String| errors.push(format!("entry {i} `{}`: {msg}", e.to_source(regs)));
        if !transient && c.pc() != spc {
            err(format!(
                "fetched from location {spc} but the architectural pc is {}",
                c.pc()
            ));
        }
        let followed_by_incr = buf.get(i + 1).is_some_and(RobEntry::is_pc_incr);
        match e {
            RobEntry::Mov {
                dst: Reg::PC,
                expr,
                tag,
                pc_incr,
            } => {
                match expr.as_value() {
                    None => err("pc assignment is unresolved".into()),
                    Some(v) if v.level != SecLevel::L => err("pc level must be L".into()),
                    Some(_) => {}
                }
                let v = expr.as_value().map(|v| v.value);
                if *pc_incr {
                    if *tag != Tag::Eps {
                        err("pc increment carries a prediction tag".into());
                    }
                    if i > 0 && buf[i - 1].is_pc_incr() {
                        err("pc increment does not follow an instruction".into());
                    }
                    if i > 0 && matches!(buf[i - 1], RobEntry::Mov { dst: Reg::PC, .. }) {
                        err("pc increment follows a control-flow entry".into());
                    }
                    if v != Some(spc.wrapping_add(1)) {
                        err(format!("pc increment should be {}", spc.wrapping_add(1)));
                    }
                } else {
                    if let Tag::Loc(l0) = tag {
                        if *l0 != spc {
                            err(format!("tag {l0} differs from fetch location {spc}"));
                        }
                    }
                    if !matches!(p.get(spc), Some(Instruction::Beqz(..) | Instruction::Jmp(..))) {
                        err(format!("no branch or jump at location {spc}"));
                    }
                }
                if let Some(v) = v {
                    spc = v;
                }
            }
            RobEntry::Mov {
                dst, expr, tag, ..
            } => {
                if !followed_by_incr {
                    err("instruction entry not followed by its pc increment".into());
                }
                match (p.get(spc), tag) {
                    (Some(Instruction::Mov(x, pe)), Tag::Eps) if x == dst => {
                        if expr.as_value().is_none() && expr != pe {
                            err("unresolved expression differs from the program".into());
                        }
                    }
                    (Some(Instruction::Load(x, _)), Tag::Eps) if x == dst => {
                        if expr.as_value().is_none() {
                            err("load result is unresolved".into());
                        }
                    }
                    (Some(Instruction::Load(x, _)), Tag::Loc(l0)) if x == dst && *l0 == spc => {
                        match expr.as_value() {
                            Some(v) if v.level == SecLevel::L => {}
                            _ => err("predicted load value must be a public literal".into()),
                        }
                    }
                    _ => err(format!("does not match the instruction at location {spc}")),
                }
            }
            RobEntry::Load { dst, addr, tag } => {
                if !followed_by_incr {
                    err("instruction entry not followed by its pc increment".into());
                }
                if *tag != Tag::Eps {
                    err("load carries a prediction tag".into());
                }
                match p.get(spc) {
                    Some(Instruction::Load(x, pe)) if x == dst && pe == addr => {}
                    _ => err(format!("does not match the instruction at location {spc}")),
                }
            }
            RobEntry::Store { addr, val, tag } => {
                if !followed_by_incr {
                    err("instruction entry not followed by its pc increment".into());
                }
                if *tag != Tag::Eps {
                    err("store carries a prediction tag".into());
                }
                match p.get(spc) {
                    Some(Instruction::Store(pa, pv)) => match (addr.as_value(), val.as_value()) {
                        (Some(av), Some(vv)) => {
                            if av.level != SecLevel::L {
                                err("resolved store address must be L".into());
                            }
                            if !transient {
                                let want_a = pa.eval_total(&c.reg).value;
                                let want_v = pv.eval_total(&c.reg);
                                if av.value != want_a || vv != want_v {
                                    err(format!(
                                        "resolved store differs from the architectural store of {want_v} to {want_a}"
                                    ));
                                }
                            }
                        }
                        _ => {
                            if addr != pa || val != pv {
                                err("unresolved store differs from the program".into());
                            }
                        }
                    },
                    _ => err(format!("does not match the instruction at location {spc}")),
                }
            }
        }
        if !transient && !goodpred(p, part, &c, e) {
            transient = true;
        }
        deep_entry(p, part, &mut c, e, None).expect("unpatched");
    }
    Analysis {
        errors,
        transient,
        deep: c,
    }
}

/// Checks that `buf` is well-formed with respect to the committed state `a`.
///
/// On failure, returns one diagnosis per broken clause.
pub fn check_wellformed(
    p: &Program,
    part: &SecretPartition,
    buf: &[RobEntry],
    a: &ArchConfig,
) -> Result<(), Vec<String>> {
    let analysis = analyze(p, part, a, buf);
    if analysis.errors.is_empty() {
        Ok(())
    } else {
        Err(analysis.errors)
    }
}

/// Evaluates every invariant monitor on a configuration.
pub fn check_invariants(h: &HardwareConfig) -> Vec<Violation> {
    let m = &h.machine;
    let (p, part) = (&*m.program, &m.partition);
    let mut out = Vec::new();
    let pc = h.reg[Reg::PC.index()];
    if pc.level != SecLevel::L {
        out.push(Violation {
            monitor: Monitor::PcLow,
            detail: format!("committed pc is {pc}"),
        });
    }
    for (i, e) in h.buf.iter().enumerate() {
        if let RobEntry::Mov {
            dst: Reg::PC, expr, ..
        } = e
        {
            if !expr.as_value().is_some_and(|v| v.is_low()) {
                out.push(Violation {
                    monitor: Monitor::PcLow,
                    detail: format!("entry {i} assigns pc a non-public value"),
                });
            }
        }
    }
    let arch = h.arch();
    let analysis = analyze(p, part, &arch, &h.buf);
    out.extend(analysis.errors.into_iter().map(|detail| Violation {
        monitor: Monitor::WellFormed,
        detail,
    }));
    if is_speculating(&h.buf) {
        let san = aplsan(&h.buf, &h.reg);
        if let Some((r, v)) = san
            .iter()
            .enumerate()
            .find_map(|(r, v)| v.filter(|v| !v.is_low()).map(|v| (r, v)))
        {
            out.push(Violation {
                monitor: Monitor::SanitizedSpeculation,
                detail: format!("register {} is {v} under speculation", p.registers().name(Reg(r as u16))),
            });
        }
    }
    if !analysis.transient {
        let pending = apl(&h.buf, &h.reg);
        for (r, v) in pending.iter().enumerate() {
            if let Some(v) = v {
                let deep = analysis.deep.reg[r];
                if *v != deep {
                    out.push(Violation {
                        monitor: Monitor::AplAgreement,
                        detail: format!(
                            "register {}: pending {v}, architecturally {deep}",
                            p.registers().name(Reg(r as u16))
                        ),
                    });
                }
            }
        }
    }
    out
}
