//! File formats: scenario files (program + layout + secrets), run
//! configurations and experiment specifications.
//!
//! All files are JSON. Paths inside a file are resolved relative to the
//! file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchConfig, Scenario, ScenarioError, SecretDomains, SecretSite};
use crate::corpus::{get_gadget, GadgetTag, UnknownGadget};
use crate::hardware::{HwParams, Mode};
use crate::isa::{parse_program, BinOp, LabeledValue, ParseError, PartitionError, Program, SecretPartition, Value};
use crate::microctx::{Script, StrategySpec};
use crate::security::{CheckKind, ExperimentSpec, DEFAULT_PAIRS, DEFAULT_SEEDS, DEFAULT_STEPS};

/// Error loading or validating a configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// A file could not be read.
    #[error("cannot read {path}: {source}")]
    Io {
        /// The file.
        path: PathBuf,
        /// The I/O error.
        source: std::io::Error,
    },
    /// A file is not valid JSON for its format.
    #[error("invalid JSON in {path}: {source}")]
    Json {
        /// The file.
        path: PathBuf,
        /// The JSON error.
        source: serde_json::Error,
    },
    /// A μASM listing does not parse.
    #[error("{path}: {error}")]
    Parse {
        /// The listing.
        path: PathBuf,
        /// The parse error.
        error: ParseError,
    },
    /// Unknown gadget name.
    #[error(transparent)]
    UnknownGadget(#[from] UnknownGadget),
    /// The scenario is inconsistent.
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    /// The partition is malformed.
    #[error(transparent)]
    Partition(#[from] PartitionError),
    /// A secret site name is malformed or names an unknown register.
    #[error("bad secret site `{0}` (expected mem:<address> or reg:<name>)")]
    BadSite(String),
    /// A register name is not declared by the program.
    #[error("unknown register `{0}`")]
    UnknownRegister(String),
    /// Neither a gadget nor a program was given, or both were.
    #[error("give exactly one of a gadget name or a program path")]
    Target,
    /// Some other invalid value.
    #[error("{0}")]
    Invalid(String),
}

/// A scenario file: a listing plus everything needed to instantiate it.
///
/// Only `program` is required.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioFile {
    /// Name for reports (defaults to the file stem).
    #[serde(default)]
    pub name: String,
    /// Description.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    /// Path of the μASM listing, relative to the scenario file.
    pub program: String,
    /// Secret memory intervals `[lo, hi]`, inclusive.
    #[serde(default)]
    pub partition: SecretPartition,
    /// Non-zero initial memory cells as `[address, value]`.
    #[serde(default)]
    pub memory: Vec<[Value; 2]>,
    /// Initial register values; registers not listed start at `0^L`.
    #[serde(default)]
    pub registers: BTreeMap<String, LabeledValue>,
    /// Secret sites (`mem:<addr>` / `reg:<name>`) and their domains.
    #[serde(default)]
    pub secrets: BTreeMap<String, DomainSpec>,
    /// Catalogued behaviors (informational).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<GadgetTag>,
    /// Recommended step bound.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Path of a scripted attack, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<String>,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

/// A secret domain in a scenario file: an explicit list or an inclusive
/// range.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainSpec {
    /// Every value in `[lo, hi]`.
    Range {
        /// Inclusive bounds.
        range: [Value; 2],
    },
    /// The listed values.
    Values(Vec<Value>),
}

impl DomainSpec {
    /// The values of the domain.
    pub fn values(&self) -> Vec<Value> {
        match self {
            DomainSpec::Range { range: [lo, hi] } => (*lo..=*hi).collect(),
            DomainSpec::Values(v) => v.clone(),
        }
    }

    /// The compact spec of a value list (a range when contiguous).
    pub fn compact(values: &[Value]) -> DomainSpec {
        let contiguous = values.len() > 2 && values.windows(2).all(|w| w[1] == w[0] + 1);
        if contiguous {
            DomainSpec::Range {
                range: [values[0], values[values.len() - 1]],
            }
        } else {
            DomainSpec::Values(values.to_vec())
        }
    }
}

/// A program with its scenario, ready to simulate.
#[derive(Clone, Debug)]
pub struct Target {
    /// Name for reports.
    pub name: String,
    /// The scenario.
    pub scenario: Scenario,
    /// Scripted attack, if any.
    pub attack: Option<Script>,
    /// Recommended step bound.
    pub steps: usize,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads and deserializes a JSON file.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a μASM listing file.
pub fn load_program(path: &Path) -> Result<Program, ConfigError> {
    parse_program(&read(path)?).map_err(|error| ConfigError::Parse {
        path: path.to_path_buf(),
        error,
    })
}

/// Parses a secret site name against a program.
pub fn parse_site(name: &str, p: &Program) -> Result<SecretSite, ConfigError> {
    SecretSite::parse(name, p).ok_or_else(|| ConfigError::BadSite(name.to_string()))
}

impl ScenarioFile {
    /// Builds the target described by this file; `base` is the directory
    /// relative paths are resolved against.
    pub fn resolve(&self, base: &Path) -> Result<Target, ConfigError> {
        let program = Arc::new(load_program(&base.join(&self.program))?);
        let mut init = ArchConfig::initial(&program);
        init.mem = self.memory.iter().map(|&[a, v]| (a, v)).collect();
        for (name, v) in &self.registers {
            let r = program
                .reg(name)
                .ok_or_else(|| ConfigError::UnknownRegister(name.clone()))?;
            init.set(r, *v);
        }
        let mut domains = SecretDomains::new();
        for (site, dom) in &self.secrets {
            domains.insert(parse_site(site, &program)?, dom.values());
        }
        let scenario = Scenario::new(program, self.partition.clone(), init, domains)?;
        let attack = match &self.attack {
            Some(path) => Some(read_json::<Script>(&base.join(path))?),
            None => None,
        };
        Ok(Target {
            name: self.name.clone(),
            scenario,
            attack,
            steps: self.steps,
        })
    }

    /// Loads a scenario file and resolves it.
    pub fn load(path: &Path) -> Result<Target, ConfigError> {
        let mut file: ScenarioFile = read_json(path)?;
        if file.name.is_empty() {
            file.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        file.resolve(path.parent().unwrap_or(Path::new(".")))
    }
}

/// Resolves a target given as a gadget name or a program path.
///
/// A `.json` path is a [`ScenarioFile`]; any other path is a bare listing
/// with an all-public partition and no secrets.
pub fn resolve_target(gadget: Option<&str>, program: Option<&Path>) -> Result<Target, ConfigError> {
    match (gadget, program) {
        (Some(name), None) => {
            let g = get_gadget(name)?;
            Ok(Target {
                name: g.name.to_string(),
                scenario: g.scenario(),
                attack: g.attack.clone(),
                steps: g.steps,
            })
        }
        (None, Some(path)) if path.extension().is_some_and(|e| e == "json") => ScenarioFile::load(path),
        (None, Some(path)) => {
            let program = Arc::new(load_program(path)?);
            let init = ArchConfig::initial(&program);
            let scenario = Scenario::new(program, SecretPartition::empty(), init, SecretDomains::new())?;
            Ok(Target {
                name: path.display().to_string(),
                scenario,
                attack: None,
                steps: DEFAULT_STEPS,
            })
        }
        _ => Err(ConfigError::Target),
    }
}

/// Machine options shared by run and experiment files.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineOptions {
    /// Rule set.
    #[serde(default)]
    pub mode: Mode,
    /// Reorder-buffer capacity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rob_capacity: Option<usize>,
    /// Variable-time operators.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variable_time: Vec<BinOp>,
    /// Disable the invariant monitors.
    #[serde(default)]
    pub no_monitors: bool,
}

impl MachineOptions {
    /// The hardware parameters.
    pub fn params(&self) -> HwParams {
        HwParams {
            mode: self.mode,
            rob_capacity: self.rob_capacity,
            variable_time: self.variable_time.iter().copied().collect(),
            monitors: !self.no_monitors,
        }
    }
}

/// A `run` configuration file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Gadget name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gadget: Option<String>,
    /// Program or scenario path (relative to the config file).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<PathBuf>,
    /// Run the sequential semantics instead of the speculative one.
    #[serde(default)]
    pub arch: bool,
    /// Machine options.
    #[serde(flatten)]
    pub machine: MachineOptions,
    /// Attacker strategy (default: round-robin).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategySpec>,
    /// Path of a scripted attack (overrides `strategy`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// Step bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Seed for seeded strategies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Values of secret sites for this run (`mem:16` → value).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub secrets: BTreeMap<String, Value>,
    /// Trace output path (JSON lines).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// An experiment file for `verify`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentFile {
    /// Which check.
    pub kind: CheckKind,
    /// Gadget name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gadget: Option<String>,
    /// Program or scenario path (relative to the experiment file).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<PathBuf>,
    /// Machine options.
    #[serde(flatten)]
    pub machine: MachineOptions,
    /// Strategy template (default: seeded-random).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategySpec>,
    /// Step bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Strategy seeds (leak search: samples).
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Pairs per seed.
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Master seed.
    #[serde(default)]
    pub seed: u64,
    /// Use the target's scripted attack for seed 0.
    #[serde(default = "default_true")]
    pub use_attack: bool,
}

fn default_seeds() -> usize {
    DEFAULT_SEEDS
}
fn default_pairs() -> usize {
    DEFAULT_PAIRS
}
fn default_true() -> bool {
    true
}

impl ExperimentFile {
    /// An experiment file for `kind` on a gadget with default budget.
    pub fn for_gadget(kind: CheckKind, gadget: &str) -> Self {
        ExperimentFile {
            kind,
            gadget: Some(gadget.to_string()),
            program: None,
            machine: MachineOptions::default(),
            strategy: None,
            n: None,
            seeds: DEFAULT_SEEDS,
            pairs: DEFAULT_PAIRS,
            seed: 0,
            use_attack: true,
        }
    }

    /// Builds the experiment; `base` resolves a relative program path.
    pub fn to_spec(&self, base: &Path) -> Result<ExperimentSpec, ConfigError> {
        let program = self.program.as_ref().map(|p| base.join(p));
        let target = resolve_target(self.gadget.as_deref(), program.as_deref())?;
        let mut spec = ExperimentSpec::new(target.name, target.scenario, self.machine.mode);
        spec.params = self.machine.params();
        if let Some(s) = &self.strategy {
            spec.strategy = s.clone();
        }
        spec.n = self.n.unwrap_or(target.steps);
        spec.seeds = self.seeds;
        spec.pairs = self.pairs;
        spec.seed = self.seed;
        spec.attack = if self.use_attack { target.attack } else { None };
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }
}

/// Parses `lo..hi` (inclusive) or a comma-separated list into a domain.
pub fn parse_domain(s: &str) -> Result<Vec<Value>, ConfigError> {
    let bad = || ConfigError::Invalid(format!("bad domain `{s}` (expected LO..HI or V1,V2,...)"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: Value = parse_value(lo).ok_or_else(bad)?;
        let hi: Value = parse_value(hi).ok_or_else(bad)?;
        if lo > hi || hi - lo > 1 << 20 {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',').map(|v| parse_value(v).ok_or_else(bad)).collect()
}

/// Parses a decimal or `0x` hexadecimal word.
pub fn parse_value(s: &str) -> Option<Value> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => Value::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}
