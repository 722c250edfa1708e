//! `prospect`: run, verify and attack μASM programs on the speculative
//! processor model.
//!
//! Exit codes: 0 pass / complete, 1 security failure or witness found,
//! 2 configuration error or unmet precondition, 3 invariant violation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use prospect::arch::{arch_step, ArchStep, Observation};
use prospect::config::{
    parse_site, parse_value, read_json, resolve_target, ConfigError, ExperimentFile, MachineOptions,
    RunConfig, Target,
};
use prospect::corpus::{all_gadgets, export_files};
use prospect::hardware::{hw_step, HardwareConfig, Machine, Mode, TraceRecord};
use prospect::microctx::{Script, StrategySpec};
use prospect::security::{
    classical_decl_check, leak_search_report, theorem1_check, theorem2_check, CheckKind, Report,
    DEFAULT_LEAK_BUDGET,
};

#[derive(Parser)]
#[command(name = "prospect", version, about = "Speculative processor model with secrecy tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and write a step trace (JSON lines).
    Run(RunArgs),
    /// Run a security check and write a verdict (JSON).
    Verify(VerifyArgs),
    /// Search for a leak witness on a gadget.
    Attack(AttackArgs),
    /// List the gadget catalog.
    Gadgets,
    /// Write every gadget's listing, scenario and attack script to a
    /// directory.
    Export {
        /// Output directory.
        #[arg(long, default_value = "corpus")]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Prospect,
    #[value(alias = "insecure-baseline")]
    Insecure,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Prospect => Mode::Prospect,
            ModeArg::Insecure => Mode::InsecureBaseline,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Thm1,
    Thm2,
    Classical,
    LeakSearch,
}

impl From<KindArg> for CheckKind {
    fn from(k: KindArg) -> CheckKind {
        match k {
            KindArg::Thm1 => CheckKind::Thm1,
            KindArg::Thm2 => CheckKind::Thm2,
            KindArg::Classical => CheckKind::Classical,
            KindArg::LeakSearch => CheckKind::LeakSearch,
        }
    }
}

#[derive(Args, Clone)]
struct TargetArgs {
    /// A catalogued gadget.
    #[arg(long, conflicts_with = "program")]
    gadget: Option<String>,
    /// A μASM listing (.uasm) or scenario file (.json).
    #[arg(long)]
    program: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct MachineArgs {
    /// Rule set.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Attacker strategy: round-robin, seeded-random, always-taken or
    /// constant-value:V.
    #[arg(long)]
    strategy: Option<String>,
    /// Step bound.
    #[arg(short = 'n', long = "steps")]
    n: Option<usize>,
    /// Master seed (falls back to PROSPECT_SIM_SEED, then 0).
    #[arg(long, env = "PROSPECT_SIM_SEED")]
    seed: Option<u64>,
    /// Reorder-buffer capacity.
    #[arg(long)]
    rob_capacity: Option<usize>,
    /// Disable the invariant monitors.
    #[arg(long)]
    no_monitors: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[command(flatten)]
    machine: MachineArgs,
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run the sequential semantics.
    #[arg(long)]
    arch: bool,
    /// Scripted strategy file ({"steps": [{"next": "fetch", "predict": 1}, ...]}).
    #[arg(long)]
    script: Option<PathBuf>,
    /// Secret value for this run, e.g. mem:16=42 (repeatable).
    #[arg(long = "secret", value_name = "SITE=VALUE")]
    secrets: Vec<String>,
    /// Trace output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which check (required unless given by --config).
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[command(flatten)]
    target: TargetArgs,
    #[command(flatten)]
    machine: MachineArgs,
    /// Experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Strategy seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Pairs per seed.
    #[arg(long)]
    pairs: Option<usize>,
    /// Do not use the target's scripted attack for seed 0.
    #[arg(long)]
    no_attack: bool,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Verdict output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the witness (on failure) to this file.
    #[arg(long)]
    witness: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[command(flatten)]
    machine: MachineArgs,
    /// Number of samples.
    #[arg(long, default_value_t = DEFAULT_LEAK_BUDGET)]
    budget: usize,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Witness / report output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure that maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl From<ConfigError> for UsageError {
    fn from(e: ConfigError) -> Self {
        UsageError(e.to_string())
    }
}

impl From<io::Error> for UsageError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            // The reader went away (e.g. `| head`); nothing left to report.
            std::process::exit(0);
        }
        UsageError(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Gadgets => cmd_gadgets(),
        Command::Export { dir } => cmd_export(&dir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(UsageError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn parse_strategy(s: &str, seed: u64) -> Result<StrategySpec, UsageError> {
    Ok(match s {
        "round-robin" => StrategySpec::RoundRobin,
        "seeded-random" => StrategySpec::SeededRandom { seed },
        "always-taken" => StrategySpec::AlwaysTaken,
        _ => match s.strip_prefix("constant-value:").and_then(parse_value) {
            Some(value) => StrategySpec::ConstantValue { value },
            None => {
                return Err(UsageError(format!(
                    "unknown strategy `{s}` (round-robin, seeded-random, always-taken, constant-value:V)"
                )))
            }
        },
    })
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>, UsageError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| {
            UsageError(format!("cannot create {}: {e}", p.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json_line<T: Serialize>(out: &mut dyn Write, v: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    out.write_all(b"\n")
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Serialize)]
struct ArchRecord {
    step: usize,
    pc: u64,
    obs: Observation,
    #[serde(skip_serializing_if = "Option::is_none")]
    decl: Option<u64>,
}

fn cmd_run(args: RunArgs) -> Result<u8, UsageError> {
    let (mut cfg, base) = match &args.config {
        Some(p) => (read_json::<RunConfig>(p)?, base_dir(p)),
        None => (RunConfig::default(), PathBuf::new()),
    };
    // Command-line flags override the configuration file.
    if args.target.gadget.is_some() || args.target.program.is_some() {
        cfg.gadget = args.target.gadget.clone();
        cfg.program = args.target.program.clone();
    } else if let Some(p) = cfg.program.take() {
        cfg.program = Some(base.join(p));
    }
    cfg.arch |= args.arch;
    if let Some(m) = args.machine.mode {
        cfg.machine.mode = m.into();
    }
    if let Some(c) = args.machine.rob_capacity {
        cfg.machine.rob_capacity = Some(c);
    }
    cfg.machine.no_monitors |= args.machine.no_monitors;
    let seed = args.machine.seed.or(cfg.seed).unwrap_or(0);
    if let Some(s) = &args.machine.strategy {
        cfg.strategy = Some(parse_strategy(s, seed)?);
    }
    if let Some(s) = args.script {
        cfg.script = Some(s);
    } else if let Some(s) = cfg.script.take() {
        cfg.script = Some(base.join(s));
    }
    if let Some(n) = args.machine.n {
        cfg.n = Some(n);
    }
    for kv in &args.secrets {
        let (site, v) = kv
            .split_once('=')
            .ok_or_else(|| UsageError(format!("bad --secret `{kv}` (expected SITE=VALUE)")))?;
        let v = parse_value(v).ok_or_else(|| UsageError(format!("bad value in --secret `{kv}`")))?;
        cfg.secrets.insert(site.to_string(), v);
    }
    let out_path = args.out.or_else(|| cfg.out.as_ref().map(|o| base.join(o)));

    let target = resolve_target(cfg.gadget.as_deref(), cfg.program.as_deref())?;
    let init = initial_config(&target, &cfg.secrets)?;
    let n = cfg.n.unwrap_or(target.steps);
    let program = &target.scenario.program;
    let mut out = open_out(out_path.as_deref())?;

    if cfg.arch {
        let mut c = init;
        let mut steps = 0;
        for step in 0..n {
            let pc = c.pc();
            match arch_step(program, &target.scenario.partition, &mut c) {
                ArchStep::Halt => break,
                ArchStep::Step { obs, decl } => {
                    write_json_line(&mut out, &ArchRecord { step, pc, obs, decl })?;
                    steps += 1;
                }
            }
        }
        out.flush()?;
        eprintln!("{steps} architectural step(s); final pc {}", c.pc());
        return Ok(0);
    }

    let strategy = match &cfg.script {
        Some(p) => StrategySpec::Scripted(read_json::<Script>(p)?),
        None => match cfg.strategy.clone() {
            Some(s) => s.with_seed(seed),
            None => StrategySpec::RoundRobin,
        },
    };
    let machine = Machine::new(
        Arc::clone(program),
        target.scenario.partition.clone(),
        cfg.machine.params(),
    );
    let mut h = HardwareConfig::initial(machine, &init, strategy);
    let mut violations = 0;
    let mut retired = 0;
    for step in 0..n {
        let s = hw_step(&mut h);
        violations += s.violations.len();
        retired += usize::from(s.retired.is_some());
        write_json_line(&mut out, &TraceRecord::new(step, &s, &h))?;
    }
    out.flush()?;
    eprintln!(
        "{n} step(s), {retired} retirement(s), buffer {} entr{}, pc {}, {} attacker event(s)",
        h.buf.len(),
        if h.buf.len() == 1 { "y" } else { "ies" },
        h.pc(),
        h.mu.log().len()
    );
    if violations > 0 {
        eprintln!("{violations} invariant violation(s)");
        return Ok(3);
    }
    Ok(0)
}

fn initial_config(
    target: &Target,
    secrets: &BTreeMap<String, u64>,
) -> Result<prospect::ArchConfig, UsageError> {
    let sc = &target.scenario;
    let mut assignment: Vec<u64> = sc.sites().iter().map(|(_, d)| d[0]).collect();
    for (name, v) in secrets {
        let site = parse_site(name, &sc.program)?;
        let i = sc
            .sites()
            .iter()
            .position(|(s, _)| *s == site)
            .ok_or_else(|| UsageError(format!("`{name}` is not a secret site of this scenario")))?;
        assignment[i] = *v;
    }
    Ok(sc.instantiate(&assignment))
}

fn machine_options(base: MachineOptions, args: &MachineArgs) -> MachineOptions {
    let mut m = base;
    if let Some(mode) = args.mode {
        m.mode = mode.into();
    }
    if let Some(c) = args.rob_capacity {
        m.rob_capacity = Some(c);
    }
    m.no_monitors |= args.no_monitors;
    m
}

fn write_report(report: &Report, out: Option<&Path>, witness: Option<&Path>) -> Result<u8, UsageError> {
    let mut w = open_out(out)?;
    w.write_all(report.to_json().as_bytes())?;
    w.flush()?;
    if let (Some(path), Some(wit)) = (witness, &report.witness) {
        let mut s = serde_json::to_string_pretty(wit).expect("witnesses serialize");
        s.push('\n');
        fs::write(path, s).map_err(|e| UsageError(format!("cannot write {}: {e}", path.display())))?;
    }
    eprintln!("{}: {:?} — {}", report.check, report.verdict, report.summary);
    Ok(report.verdict.exit_code() as u8)
}

fn cmd_verify(args: VerifyArgs) -> Result<u8, UsageError> {
    let (mut file, base) = match &args.config {
        Some(p) => (read_json::<ExperimentFile>(p)?, base_dir(p)),
        None => {
            let kind = args
                .kind
                .ok_or_else(|| UsageError("--kind is required without --config".into()))?;
            (ExperimentFile::for_gadget(kind.into(), ""), PathBuf::new())
        }
    };
    if let Some(k) = args.kind {
        file.kind = k.into();
    }
    if args.target.gadget.is_some() || args.target.program.is_some() {
        file.gadget = args.target.gadget.clone();
        file.program = args
            .target
            .program
            .as_ref()
            .map(|p| std::env::current_dir().unwrap_or_default().join(p));
    } else if file.gadget.as_deref() == Some("") {
        return Err(UsageError("give --gadget or --program".into()));
    }
    file.machine = machine_options(file.machine, &args.machine);
    let seed = args.machine.seed.unwrap_or(file.seed);
    file.seed = seed;
    if let Some(s) = &args.machine.strategy {
        file.strategy = Some(parse_strategy(s, seed)?);
    }
    if let Some(n) = args.machine.n {
        file.n = Some(n);
    }
    if let Some(s) = args.seeds {
        file.seeds = s;
    }
    if let Some(p) = args.pairs {
        file.pairs = p;
    }
    file.use_attack &= !args.no_attack;
    let mut spec = file.to_spec(&base)?;
    spec.jobs = args.jobs;
    let report = match file.kind {
        CheckKind::Thm1 => theorem1_check(&spec),
        CheckKind::Thm2 => theorem2_check(&spec),
        CheckKind::Classical => classical_decl_check(&spec),
        CheckKind::LeakSearch => leak_search_report(&spec, spec.seeds),
    };
    write_report(&report, args.out.as_deref(), args.witness.as_deref())
}

fn cmd_attack(args: AttackArgs) -> Result<u8, UsageError> {
    let mut file = ExperimentFile::for_gadget(CheckKind::LeakSearch, "");
    file.gadget = args.target.gadget.clone();
    file.program = args.target.program.clone();
    let mut machine = machine_options(MachineOptions::default(), &args.machine);
    if args.machine.mode.is_none() {
        machine.mode = Mode::InsecureBaseline;
    }
    file.machine = machine;
    file.seed = args.machine.seed.unwrap_or(0);
    file.n = args.machine.n;
    let mut spec = file.to_spec(Path::new(""))?;
    spec.jobs = args.jobs;
    let report = leak_search_report(&spec, args.budget);
    write_report(&report, args.out.as_deref(), None)
}

fn cmd_gadgets() -> Result<u8, UsageError> {
    let mut out = io::stdout().lock();
    for g in all_gadgets() {
        let tags: Vec<String> = g.tags.iter().map(ToString::to_string).collect();
        writeln!(
            out,
            "{:<18} {:<32} {}",
            g.name,
            if tags.is_empty() { "(documentation)".to_string() } else { tags.join(",") },
            g.description
        )?;
    }
    Ok(0)
}

fn cmd_export(dir: &Path) -> Result<u8, UsageError> {
    fs::create_dir_all(dir)?;
    let mut count = 0;
    for g in all_gadgets() {
        for (name, contents) in export_files(&g) {
            fs::write(dir.join(&name), contents)?;
            count += 1;
        }
    }
    eprintln!("wrote {count} file(s) to {}", dir.display());
    Ok(0)
}
