//! The gadget catalog: μASM encodings of the classic transient-execution
//! snippets and of the declassification examples, each with its memory
//! layout, secret partition, register initialization, secret domains and a
//! scripted attack where one exists.
//!
//! The transient-execution gadgets share one memory layout:
//!
//! | addresses      | contents                                   | level |
//! |----------------|--------------------------------------------|-------|
//! | 0 – 15         | array `A`, `A[i] = i`                      | L     |
//! | 16             | the secret byte (`ptr_s`)                  | H     |
//! | 17 – 16400     | probe array `B`, 256 lines of stride 64    | L     |
//! | 16401          | `trusted_idx = 3`                          | L     |
//!
//! The cache-encoding helper `leak(x)` is inlined wherever it is used:
//! `t <- x * 64; y <- load 17 + t`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchConfig, Memory, Scenario, SecretDomains, SecretSite};
use crate::isa::{parse_program, LabeledValue, Program, SecretPartition, Value};
use crate::config::{DomainSpec, ScenarioFile};
use crate::microctx::{Directive, Script};

/// Address of the secret byte in the shared layout.
pub const SECRET_ADDR: Value = 16;
/// Base address of the probe array `B`.
pub const PROBE_BASE: Value = 17;
/// Stride of the probe array.
pub const PROBE_STRIDE: Value = 64;
/// Address of `trusted_idx`.
pub const TRUSTED_IDX_ADDR: Value = 16401;
/// Initial value of `trusted_idx`.
pub const TRUSTED_IDX: Value = 3;
/// Public address used by the declassification gadgets.
pub const DECLASS_ADDR: Value = 100;

/// The expected behavior a gadget is catalogued for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GadgetTag {
    /// Leaks its secret under the insecure baseline.
    LeaksInsecure,
    /// Constant-time with no declassification.
    CtPlain,
    /// Constant-time up to declassification.
    CtUpToDecl,
    /// Demonstrates rollback of correct predictions on secret loads.
    RollbackDemo,
    /// Separates the classical declassification condition from the patched
    /// one.
    ClassicalDeclDemo,
}

impl fmt::Display for GadgetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GadgetTag::LeaksInsecure => "leaks_insecure",
            GadgetTag::CtPlain => "ct_plain",
            GadgetTag::CtUpToDecl => "ct_up_to_decl",
            GadgetTag::RollbackDemo => "rollback_demo",
            GadgetTag::ClassicalDeclDemo => "classical_decl_demo",
        })
    }
}

/// A catalogued program with everything needed to simulate it.
#[derive(Clone, Debug)]
pub struct Gadget {
    /// Catalog name, e.g. `spectre-pht`.
    pub name: &'static str,
    /// Stem of the exported files, e.g. `pht` for `corpus/pht.uasm`.
    pub stem: &'static str,
    /// One-line description.
    pub description: &'static str,
    /// The μASM listing.
    pub source: &'static str,
    /// The parsed program.
    pub program: Arc<Program>,
    /// Memory partition.
    pub partition: SecretPartition,
    /// Initial architectural state (secret sites hold placeholder values).
    pub init: ArchConfig,
    /// Domains of the secret inputs.
    pub domains: SecretDomains,
    /// Catalogued behaviors. Documentation-only gadgets have none.
    pub tags: Vec<GadgetTag>,
    /// A scripted attack (directives and predictions) that exposes the leak
    /// under the insecure baseline.
    pub attack: Option<Script>,
    /// Step bound that comfortably covers a complete run.
    pub steps: usize,
}

impl Gadget {
    /// Whether the gadget carries `tag`.
    pub fn has_tag(&self, tag: GadgetTag) -> bool {
        self.tags.contains(&tag)
    }

    /// The scenario (program, partition, initial state, secret domains).
    pub fn scenario(&self) -> Scenario {
        Scenario::new(
            Arc::clone(&self.program),
            self.partition.clone(),
            self.init.clone(),
            self.domains.clone(),
        )
        .expect("catalogued gadgets have valid scenarios")
    }
}

/// The requested gadget is not in the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown gadget `{0}` (known: {known})", known = GADGET_NAMES.join(", "))]
pub struct UnknownGadget(pub String);

/// Names of all catalogued gadgets, in catalog order.
pub const GADGET_NAMES: [&str; 9] = [
    "spectre-pht",
    "spectre-btb",
    "spectre-stl",
    "lvi",
    "example2",
    "listing2",
    "listing3",
    "spt",
    "declassify-public",
];

/// Looks up a gadget by name.
pub fn get_gadget(name: &str) -> Result<Gadget, UnknownGadget> {
    let g = match name {
        "spectre-pht" => spectre_pht(),
        "spectre-btb" => spectre_btb(),
        "spectre-stl" => spectre_stl(),
        "lvi" => lvi(),
        "example2" => example2(),
        "listing2" => listing2(),
        "listing3" => listing3(),
        "spt" => spt(),
        "declassify-public" => declassify_public(),
        _ => return Err(UnknownGadget(name.to_string())),
    };
    Ok(g)
}

/// Every gadget, in catalog order.
pub fn all_gadgets() -> Vec<Gadget> {
    GADGET_NAMES
        .iter()
        .map(|n| get_gadget(n).expect("catalog names resolve"))
        .collect()
}

/// Gadgets carrying `tag`, in catalog order.
pub fn gadgets_tagged(tag: GadgetTag) -> Vec<Gadget> {
    all_gadgets().into_iter().filter(|g| g.has_tag(tag)).collect()
}

/// The bijective mixing function used where a one-way function is needed:
/// a xorshift followed by multiplication with an odd constant. Both steps
/// are invertible on 64-bit words, so the function is injective.
pub fn mix(x: Value) -> Value {
    (x ^ (x >> 33)).wrapping_mul(MIX_MULTIPLIER)
}

/// The odd multiplier of [`mix`].
pub const MIX_MULTIPLIER: Value = 0xff51_afd7_ed55_8ccd;

fn byte_domain() -> Vec<Value> {
    (0..=255).collect()
}

/// The shared memory: `A[i] = i`, secret placeholder, `trusted_idx`.
fn shared_memory() -> Memory {
    let mut m: Memory = (0..16).map(|i| (i, i)).collect();
    m.set(TRUSTED_IDX_ADDR, TRUSTED_IDX);
    m
}

fn shared_partition() -> SecretPartition {
    SecretPartition::new([(SECRET_ADDR, SECRET_ADDR)]).expect("valid partition")
}

struct Builder {
    name: &'static str,
    stem: &'static str,
    description: &'static str,
    source: &'static str,
    partition: SecretPartition,
    mem: Memory,
    regs: Vec<(&'static str, LabeledValue)>,
    domains: Vec<(SecretSiteName, Vec<Value>)>,
    tags: Vec<GadgetTag>,
    attack: Option<Vec<(Directive, Option<Value>)>>,
    steps: usize,
}

enum SecretSiteName {
    Mem(Value),
    Reg(&'static str),
}

impl Builder {
    fn build(self) -> Gadget {
        let program = parse_program(self.source)
            .unwrap_or_else(|e| panic!("gadget {} does not parse: {e}", self.name));
        let mut init = ArchConfig::initial(&program);
        init.mem = self.mem;
        for (r, v) in self.regs {
            let reg = program
                .reg(r)
                .unwrap_or_else(|| panic!("gadget {} has no register {r}", self.name));
            init.set(reg, v);
        }
        let domains: SecretDomains = self
            .domains
            .into_iter()
            .map(|(site, dom)| {
                let site = match site {
                    SecretSiteName::Mem(a) => SecretSite::Mem(a),
                    SecretSiteName::Reg(r) => SecretSite::Reg(program.reg(r).expect("declared")),
                };
                (site, dom)
            })
            .collect::<BTreeMap<_, _>>();
        Gadget {
            name: self.name,
            stem: self.stem,
            description: self.description,
            source: self.source,
            program: Arc::new(program),
            partition: self.partition,
            init,
            domains,
            tags: self.tags,
            attack: self.attack.map(Script::new),
            steps: self.steps,
        }
    }
}

use Directive::{Execute as X, Fetch as F};

fn spectre_pht() -> Gadget {
    Builder {
        name: "spectre-pht",
        stem: "pht",
        description: "bounds-check bypass: a mispredicted bounds check reads A[16], the secret",
        source: include_str!("../gadgets/pht.uasm"),
        partition: shared_partition(),
        mem: shared_memory(),
        regs: vec![("idx", LabeledValue::low(16))],
        domains: vec![(SecretSiteName::Mem(SECRET_ADDR), byte_domain())],
        tags: vec![GadgetTag::LeaksInsecure, GadgetTag::CtPlain],
        // Predict the bounds check as passing, read A[idx], then encode the
        // value into the probe array before the branch resolves.
        attack: Some(vec![
            (F, Some(1)),
            (F, None),
            (X(1), Some(0)),
            (X(1), None),
            (F, None),
            (F, None),
            (X(3), None),
            (X(5), Some(0)),
            (X(5), None),
        ]),
        steps: 500,
    }
    .build()
}

fn spectre_btb() -> Gadget {
    Builder {
        name: "spectre-btb",
        stem: "btb",
        description: "branch-target injection: the indirect jump is predicted to the leak gadget",
        source: include_str!("../gadgets/btb.uasm"),
        partition: shared_partition(),
        mem: shared_memory(),
        regs: vec![],
        domains: vec![(SecretSiteName::Mem(SECRET_ADDR), byte_domain())],
        tags: vec![GadgetTag::LeaksInsecure, GadgetTag::CtPlain],
        // Load the secret, predict `jmp f` to Lleak (6), encode.
        attack: Some(vec![
            (F, None),
            (F, None),
            (X(2), Some(0)),
            (X(2), None),
            (F, Some(6)),
            (F, None),
            (F, None),
            (X(0), None),
            (X(5), None),
            (X(7), Some(0)),
            (X(7), None),
        ]),
        steps: 500,
    }
    .build()
}

fn spectre_stl() -> Gadget {
    Builder {
        name: "spectre-stl",
        stem: "stl",
        description: "speculative store bypass: the load reads the secret before the sanitizing store",
        source: include_str!("../gadgets/stl.uasm"),
        partition: shared_partition(),
        mem: shared_memory(),
        regs: vec![],
        domains: vec![(SecretSiteName::Mem(SECRET_ADDR), byte_domain())],
        tags: vec![GadgetTag::LeaksInsecure, GadgetTag::CtPlain],
        // Fetch the store and the first load, let the load bypass the
        // pending store, then fetch and execute the dependent probe.
        attack: Some(vec![
            (F, None),
            (F, None),
            (X(2), Some(0)),
            (X(2), None),
            (F, None),
            (F, None),
            (X(4), None),
            (X(6), Some(0)),
            (X(6), None),
        ]),
        steps: 500,
    }
    .build()
}

fn lvi() -> Gadget {
    Builder {
        name: "lvi",
        stem: "lvi",
        description: "load-value injection: trusted_idx is predicted to be 16",
        source: include_str!("../gadgets/lvi.uasm"),
        partition: shared_partition(),
        mem: shared_memory(),
        regs: vec![],
        domains: vec![(SecretSiteName::Mem(SECRET_ADDR), byte_domain())],
        tags: vec![GadgetTag::LeaksInsecure, GadgetTag::CtPlain],
        // Inject 16 as the value of trusted_idx, read A[16], encode.
        attack: Some(vec![
            (F, None),
            (F, None),
            (X(0), Some(16)),
            (X(2), Some(0)),
            (X(2), None),
            (F, None),
            (F, None),
            (X(4), None),
            (X(6), Some(0)),
            (X(6), None),
        ]),
        steps: 500,
    }
    .build()
}

fn example2() -> Gadget {
    Builder {
        name: "example2",
        stem: "example2",
        description: "a load from secret memory followed by a dependent assignment",
        source: include_str!("../gadgets/example2.uasm"),
        partition: shared_partition(),
        mem: shared_memory(),
        regs: vec![],
        domains: vec![(SecretSiteName::Mem(SECRET_ADDR), byte_domain())],
        tags: vec![GadgetTag::CtPlain, GadgetTag::RollbackDemo],
        attack: None,
        steps: 500,
    }
    .build()
}

fn listing2() -> Gadget {
    Builder {
        name: "listing2",
        stem: "listing2",
        description: "declassification of f(s) through public memory; only the declassified value may leak",
        source: include_str!("../gadgets/listing2.uasm"),
        partition: SecretPartition::empty(),
        mem: Memory::new(),
        regs: vec![
            ("s", LabeledValue::high(0)),
            ("c1", LabeledValue::low(1)),
            ("c2", LabeledValue::low(0)),
            ("c3", LabeledValue::low(0)),
        ],
        domains: vec![(SecretSiteName::Reg("s"), byte_domain())],
        tags: vec![GadgetTag::CtUpToDecl],
        // Predict every condition as true: the c2 body leaks s transiently.
        attack: Some(vec![
            (F, None),
            (F, None),
            (F, None),
            (F, Some(4)),
            (F, None),
            (F, Some(6)),
            (F, None),
            (X(10), Some(0)),
            (X(10), None),
        ]),
        steps: 500,
    }
    .build()
}

fn listing3() -> Gadget {
    Builder {
        name: "listing3",
        stem: "listing3",
        description: "declassifying an injective f(m) implicitly declassifies m",
        source: include_str!("../gadgets/listing3.uasm"),
        partition: SecretPartition::empty(),
        mem: Memory::new(),
        regs: vec![("m", LabeledValue::high(0)), ("v1", LabeledValue::low(0))],
        domains: vec![(SecretSiteName::Reg("m"), (0..8).collect())],
        tags: vec![GadgetTag::CtUpToDecl, GadgetTag::ClassicalDeclDemo],
        // Predict the guard as true and load from m.
        attack: Some(vec![
            (F, None),
            (F, None),
            (F, Some(3)),
            (F, None),
            (X(5), Some(0)),
            (X(5), None),
        ]),
        steps: 500,
    }
    .build()
}

fn spt() -> Gadget {
    Builder {
        name: "spt",
        stem: "spt",
        description: "taint-tracking comparison snippet (documentation only)",
        source: include_str!("../gadgets/spt.uasm"),
        partition: shared_partition(),
        mem: shared_memory(),
        regs: vec![("a", LabeledValue::low(SECRET_ADDR)), ("c", LabeledValue::low(0))],
        domains: vec![(SecretSiteName::Mem(SECRET_ADDR), (0..16).collect())],
        tags: vec![],
        attack: None,
        steps: 500,
    }
    .build()
}

fn declassify_public() -> Gadget {
    Builder {
        name: "declassify-public",
        stem: "declassify-public",
        description: "a single store of public data to public memory",
        source: include_str!("../gadgets/declassify-public.uasm"),
        partition: shared_partition(),
        mem: shared_memory(),
        regs: vec![],
        domains: vec![(SecretSiteName::Mem(SECRET_ADDR), byte_domain())],
        tags: vec![GadgetTag::CtUpToDecl],
        attack: None,
        steps: 200,
    }
    .build()
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// The files exported for one gadget: `(relative path, contents)`.
pub fn export_files(g: &Gadget) -> Vec<(String, String)> {
    let p = &g.program;
    let registers = p
        .registers()
        .iter()
        .filter(|(r, _)| *r != crate::isa::Reg::PC)
        .filter(|(r, _)| g.init.get(*r) != LabeledValue::low(0))
        .map(|(r, name)| (name.to_string(), g.init.get(r)))
        .collect();
    let meta = ScenarioFile {
        name: g.name.to_string(),
        description: g.description.to_string(),
        program: format!("{}.uasm", g.stem),
        partition: g.partition.clone(),
        memory: g.init.mem.iter().map(|(a, v)| [a, v]).collect(),
        registers,
        secrets: g
            .domains
            .iter()
            .map(|(s, d)| (s.name(p), DomainSpec::compact(d)))
            .collect(),
        tags: g.tags.clone(),
        steps: g.steps,
        attack: g.attack.as_ref().map(|_| format!("{}.attack.json", g.stem)),
    };
    let mut out = vec![
        (format!("{}.uasm", g.stem), g.source.to_string()),
        (format!("{}.json", g.stem), to_json(&meta)),
    ];
    if let Some(script) = &g.attack {
        out.push((format!("{}.attack.json", g.stem), to_json(script)));
    }
    out
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}
