//! The attacker-controlled microarchitectural context `μ`.
//!
//! `μ` offers three deterministic functions to the speculative semantics:
//! `update` (absorb everything that could leak this step), `predict` (choose a
//! branch target, jump target or load value) and `next` (choose the directive
//! to apply). It is modeled as an append-only log of [`MicroEvent`]s plus the
//! state of a [`StrategySpec`]: every decision is a pure function of the log,
//! the strategy and its seed, so two runs whose logs agree make identical
//! decisions.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::LowSnapshot;
use crate::isa::{Loc, Value};

/// A scheduling decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Directive {
    /// Fetch the instruction at the speculative `pc`.
    Fetch,
    /// Execute the reorder-buffer entry at this index.
    Execute(usize),
    /// Retire the oldest reorder-buffer entry.
    Retire,
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directive::Fetch => f.write_str("fetch"),
            Directive::Execute(i) => write!(f, "execute:{i}"),
            Directive::Retire => f.write_str("retire"),
        }
    }
}

/// A directive string that is not `fetch`, `retire` or `execute:<index>`.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid directive `{0}` (expected fetch, retire or execute:<index>)")]
pub struct DirectiveParseError(String);

impl FromStr for Directive {
    type Err = DirectiveParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fetch" => Ok(Directive::Fetch),
            "retire" => Ok(Directive::Retire),
            _ => s
                .strip_prefix("execute:")
                .and_then(|i| i.parse().ok())
                .map(Directive::Execute)
                .ok_or_else(|| DirectiveParseError(s.to_string())),
        }
    }
}

impl TryFrom<String> for Directive {
    type Error = DirectiveParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Directive> for String {
    fn from(d: Directive) -> String {
        d.to_string()
    }
}

/// The public situation in which a prediction is requested. Everything in it
/// is derived from the (public) program counter and the program text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PredictSite {
    /// A conditional branch at `at` jumping to `target` when its condition is
    /// zero; the fall-through location is `at + 1`.
    Branch {
        /// Location of the branch.
        at: Loc,
        /// Its jump target.
        target: Loc,
    },
    /// An indirect jump at `at` in a program of `program_len` instructions.
    Jump {
        /// Location of the jump.
        at: Loc,
        /// Number of instructions in the program.
        program_len: usize,
    },
    /// The value of the load at `at`.
    LoadValue {
        /// Location of the load.
        at: Loc,
    },
}

impl PredictSite {
    /// The static "no speculation" prediction: fall through for control flow,
    /// zero for load values.
    pub fn fallback(&self) -> Value {
        match *self {
            PredictSite::Branch { at, .. } | PredictSite::Jump { at, .. } => at.wrapping_add(1),
            PredictSite::LoadValue { .. } => 0,
        }
    }
}

/// One entry of the attacker-visible log.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum MicroEvent {
    /// The canonical serialization of the low projections of memory,
    /// registers and reorder buffer, absorbed at the start of every step.
    Preamble(Arc<[u8]>),
    /// A memory address touched by a load or a retiring store.
    LeakAddr(Value),
    /// The location of a fetched control-flow instruction whose target was
    /// predicted.
    LeakPredTag(Loc),
    /// A predicted load value.
    LeakPredValue(Value),
}

impl MicroEvent {
    /// Appends the event's canonical serialization to `out`.
    pub fn write_canonical(&self, out: &mut Vec<u8>) {
        match self {
            MicroEvent::Preamble(bytes) => {
                out.push(0);
                out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                out.extend_from_slice(bytes);
            }
            MicroEvent::LeakAddr(a) => {
                out.push(1);
                out.extend_from_slice(&a.to_le_bytes());
            }
            MicroEvent::LeakPredTag(l) => {
                out.push(2);
                out.extend_from_slice(&l.to_le_bytes());
            }
            MicroEvent::LeakPredValue(v) => {
                out.push(3);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    /// A short human-readable rendering (preambles are summarized by length
    /// and hash).
    pub fn summary(&self) -> String {
        match self {
            MicroEvent::Preamble(b) => {
                format!("preamble({} bytes, fnv {:016x})", b.len(), fnv1a(FNV_OFFSET, b))
            }
            MicroEvent::LeakAddr(a) => format!("leak_addr({a})"),
            MicroEvent::LeakPredTag(l) => format!("leak_pred_tag({l})"),
            MicroEvent::LeakPredValue(v) => format!("leak_pred_value({v})"),
        }
    }
}

impl Serialize for MicroEvent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.summary())
    }
}

/// A scripted strategy: one directive (and optionally one prediction) per
/// step. Once exhausted it behaves like [`StrategySpec::RoundRobin`] with
/// fallback predictions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Script {
    /// The steps, in order.
    pub steps: Vec<ScriptStep>,
}

/// One scripted step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScriptStep {
    /// The directive to apply.
    pub next: Directive,
    /// The value returned if this step requests a prediction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<Value>,
}

impl Script {
    /// A script from directives and predictions.
    pub fn new(steps: impl IntoIterator<Item = (Directive, Option<Value>)>) -> Script {
        Script {
            steps: steps
                .into_iter()
                .map(|(next, predict)| ScriptStep { next, predict })
                .collect(),
        }
    }
}

/// How the attacker schedules and predicts.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StrategySpec {
    /// Fetch, execute every reorder-buffer index in order, retire; repeat.
    /// Predictions fall through (control flow) or are 0 (load values).
    RoundRobin,
    /// Pseudo-random directives and predictions derived from the seed and the
    /// log.
    SeededRandom {
        /// The seed.
        seed: u64,
    },
    /// A fixed script.
    Scripted(Script),
    /// Round-robin scheduling; conditional branches are predicted to jump.
    AlwaysTaken,
    /// Round-robin scheduling; every prediction returns `value`.
    ConstantValue {
        /// The predicted value.
        value: Value,
    },
}

impl StrategySpec {
    /// The same strategy with its randomness re-seeded (only
    /// [`StrategySpec::SeededRandom`] has any).
    pub fn with_seed(&self, seed: u64) -> StrategySpec {
        match self {
            StrategySpec::SeededRandom { .. } => StrategySpec::SeededRandom { seed },
            other => other.clone(),
        }
    }
}

/// Comparing contexts built under different strategies is meaningless.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("microarchitectural contexts use different strategies")]
pub struct StrategyMismatch;

/// Default byte budget for retained low snapshots.
pub const DEFAULT_RETAIN_BUDGET: usize = 1 << 20;

/// The microarchitectural context.
#[derive(Clone, Debug)]
pub struct MicroContext {
    spec: Arc<StrategySpec>,
    log: Vec<MicroEvent>,
    /// Stable rolling hash of the log.
    digest: u64,
    /// Number of `next` calls so far.
    decisions: usize,
    /// Round-robin cursor: 0 means "fetch next".
    cursor: usize,
    /// Most recent low snapshots (newest last), kept for strategies within a
    /// byte budget; at least the newest is always kept.
    retained: VecDeque<Arc<LowSnapshot>>,
    retained_bytes: usize,
    retain_budget: usize,
}

impl MicroContext {
    /// A fresh context `μ0` for a strategy.
    pub fn new(spec: StrategySpec) -> Self {
        MicroContext {
            spec: Arc::new(spec),
            log: Vec::new(),
            digest: FNV_OFFSET,
            decisions: 0,
            cursor: 0,
            retained: VecDeque::new(),
            retained_bytes: 0,
            retain_budget: DEFAULT_RETAIN_BUDGET,
        }
    }

    /// Sets the byte budget for retained snapshots.
    pub fn with_retain_budget(mut self, bytes: usize) -> Self {
        self.retain_budget = bytes;
        self
    }

    /// The strategy.
    pub fn spec(&self) -> &StrategySpec {
        &self.spec
    }

    /// The event log.
    pub fn log(&self) -> &[MicroEvent] {
        &self.log
    }

    /// The stable hash of the log.
    pub fn digest(&self) -> u64 {
        self.digest
    }

    /// Retained snapshots, oldest first.
    pub fn retained(&self) -> impl Iterator<Item = &LowSnapshot> {
        self.retained.iter().map(|s| &**s)
    }

    /// The canonical serialization of the whole log.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.log {
            e.write_canonical(&mut out);
        }
        out
    }

    /// Appends a rule-level event.
    pub fn leak(&mut self, e: MicroEvent) {
        let mut bytes = Vec::with_capacity(16);
        e.write_canonical(&mut bytes);
        self.digest = fnv1a(self.digest, &bytes);
        self.log.push(e);
    }

    /// `update`: absorbs the low projections of memory, registers and
    /// reorder buffer as a preamble event.
    ///
    /// # Panics
    ///
    /// If the snapshot contains an `H`-labeled value; snapshots are low
    /// projections by construction, so this indicates a bug.
    pub fn update(&mut self, snap: LowSnapshot) {
        assert!(
            snap.is_low(),
            "the microarchitectural context only absorbs low projections"
        );
        let bytes: Arc<[u8]> = snap.canonical_bytes().into();
        self.digest = fnv1a(self.digest, &[0]);
        self.digest = fnv1a(self.digest, &bytes);
        self.log.push(MicroEvent::Preamble(bytes));
        let size = snap.approx_bytes();
        self.retained.push_back(Arc::new(snap));
        self.retained_bytes += size;
        while self.retained.len() > 1 && self.retained_bytes > self.retain_budget {
            if let Some(old) = self.retained.pop_front() {
                self.retained_bytes -= old.approx_bytes();
            }
        }
    }

    fn latest(&self) -> Option<&LowSnapshot> {
        self.retained.back().map(|s| &**s)
    }

    /// A generator determined by the seed, the log length, the log hash and a
    /// purpose tag.
    fn rng(&self, seed: u64, purpose: u8) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(self.log.len() as u64).to_le_bytes());
        key[16..24].copy_from_slice(&self.digest.to_le_bytes());
        key[24] = purpose;
        ChaCha8Rng::from_seed(key)
    }

    fn round_robin(&mut self) -> Directive {
        let buf_len = self.latest().map_or(0, |s| s.buf.len());
        if self.cursor == 0 {
            self.cursor = 1;
            Directive::Fetch
        } else if self.cursor - 1 < buf_len {
            self.cursor += 1;
            Directive::Execute(self.cursor - 2)
        } else {
            self.cursor = 0;
            Directive::Retire
        }
    }

    /// `next`: the directive for the current step.
    // Named after the micro-context interface; `μ` is not an iterator.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Directive {
        self.decisions += 1;
        let spec = Arc::clone(&self.spec);
        match &*spec {
            StrategySpec::RoundRobin
            | StrategySpec::AlwaysTaken
            | StrategySpec::ConstantValue { .. } => self.round_robin(),
            StrategySpec::Scripted(script) => match script.steps.get(self.decisions - 1) {
                Some(step) => step.next,
                None => self.round_robin(),
            },
            StrategySpec::SeededRandom { seed } => {
                let buf_len = self.latest().map_or(0, |s| s.buf.len());
                let mut rng = self.rng(*seed, 0);
                match rng.gen_range(0..100) {
                    0..=24 => Directive::Fetch,
                    25..=44 => Directive::Retire,
                    _ => Directive::Execute(rng.gen_range(0..buf_len.max(1))),
                }
            }
        }
    }

    /// `predict`: a prediction for `site` during the current step.
    pub fn predict(&mut self, site: PredictSite) -> Value {
        let spec = Arc::clone(&self.spec);
        match &*spec {
            StrategySpec::RoundRobin => site.fallback(),
            StrategySpec::AlwaysTaken => match site {
                PredictSite::Branch { target, .. } => target,
                other => other.fallback(),
            },
            StrategySpec::ConstantValue { value } => *value,
            StrategySpec::Scripted(script) => self
                .decisions
                .checked_sub(1)
                .and_then(|i| script.steps.get(i))
                .and_then(|s| s.predict)
                .unwrap_or_else(|| site.fallback()),
            StrategySpec::SeededRandom { seed } => {
                let mut rng = self.rng(*seed, 1);
                match site {
                    PredictSite::Branch { at, target } => {
                        if rng.gen_bool(0.5) {
                            target
                        } else {
                            at.wrapping_add(1)
                        }
                    }
                    PredictSite::Jump { program_len, .. } => rng.gen_range(0..=program_len as Value),
                    PredictSite::LoadValue { .. } => match rng.gen_range(0..4) {
                        0 => 0,
                        1 => rng.gen_range(0..32),
                        2 => {
                            let visible: Vec<Value> =
                                self.latest().map(|s| s.public_values()).unwrap_or_default();
                            if visible.is_empty() {
                                0
                            } else {
                                visible[rng.gen_range(0..visible.len())]
                            }
                        }
                        _ => rng.gen(),
                    },
                }
            }
        }
    }
}

/// `mc_equal`: whether two contexts' logs agree event by event under
/// canonical serialization.
pub fn mc_equal(a: &MicroContext, b: &MicroContext) -> Result<bool, StrategyMismatch> {
    if a.spec != b.spec {
        return Err(StrategyMismatch);
    }
    Ok(a.log.len() == b.log.len() && first_divergence(&a.log, &b.log).is_none())
}

/// The index of the first event at which two logs differ (including one log
/// ending before the other).
pub fn first_divergence(a: &[MicroEvent], b: &[MicroEvent]) -> Option<usize> {
    let common = a.len().min(b.len());
    (0..common)
        .find(|&i| a[i] != b[i])
        .or((a.len() != b.len()).then_some(common))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a, continuing from `state`. Used as the stable log hash
/// because its definition is fixed, unlike `std`'s default hasher.
fn fnv1a(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= b as u64;
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}
