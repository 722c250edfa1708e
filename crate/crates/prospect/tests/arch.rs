mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use prospect::arch::{
    arch_run, arch_run_patched, arch_step, check_constant_time, check_ct_up_to_decl, ArchConfig,
    ArchStep, CtVerdict, DeclassTrace, DeclassUnderflow, Observation, Scenario, ScenarioError,
    SecretSite, EXHAUSTIVE_PAIR_LIMIT,
};
use prospect::corpus::{gadgets_tagged, get_gadget, GadgetTag, DECLASS_ADDR, SECRET_ADDR};
use prospect::isa::{parse_program, Reg, SecLevel, SecretPartition};
use prospect::LabeledValue;
use proptest::prelude::*;

fn setup(src: &str, secret: &[(u64, u64)]) -> (Arc<prospect::Program>, SecretPartition, ArchConfig) {
    let p = Arc::new(parse_program(src).unwrap());
    let part = SecretPartition::new(secret.iter().copied()).unwrap();
    let c = ArchConfig::initial(&p);
    (p, part, c)
}

#[test]
fn initial_configuration() {
    let (p, _, c) = setup(".entry L\nx <- 1\nL:\nx <- 2", &[]);
    assert_eq!(c.pc(), 1);
    assert_eq!(c.reg.len(), p.registers().len());
    assert!(c.reg.iter().all(|v| v.level == SecLevel::L));
    assert_eq!(c.mem.get(12345), 0);
}

#[test]
fn observations_per_instruction() {
    let (p, part, mut c) = setup(
        "x <- 7\ny <- load x\nstore 20, y\nbeqz 1, Skip\njmp 6\nSkip:\nx <- 0",
        &[(16, 31)],
    );
    c.mem.set(7, 42);
    let mut obs = vec![];
    while let ArchStep::Step { obs: o, decl } = arch_step(&p, &part, &mut c) {
        obs.push(o);
        assert_eq!(decl, None, "the only store targets secret memory");
    }
    assert_eq!(
        obs,
        [
            Observation::Epsilon,
            Observation::LoadAddr(7),
            Observation::StoreAddr(20),
            Observation::BranchOutcome(false),
            Observation::JumpTarget(6),
        ]
    );
    assert_eq!(c.mem.get(20), 42);
    assert_eq!(c.pc(), 6);
}

#[test]
fn loads_take_the_level_of_their_address() {
    let (p, part, mut c) = setup("x <- load 16\ny <- load 15\nz <- x + y", &[(16, 16)]);
    let run = arch_run(&p, &part, &c, 10);
    assert!(run.halted);
    let level = |n| run.config.get(p.reg(n).unwrap()).level;
    assert_eq!((level("x"), level("y"), level("z")), (SecLevel::H, SecLevel::L, SecLevel::H));
    c.mem.set(16, 1);
    assert_eq!(arch_run(&p, &part, &c, 10).config.get(p.reg("z").unwrap()).value, 1);
}

#[test]
fn public_stores_declassify() {
    let (p, part, c) = setup("store 5, 9\nstore 16, 8\nstore 6, 7", &[(16, 16)]);
    let run = arch_run(&p, &part, &c, 10);
    assert_eq!(run.decl, DeclassTrace::from([9, 7]));
}

#[test]
fn patched_stores_write_the_trace() {
    let (p, part, c) = setup("store 5, 9\nstore 16, 8\nstore 6, 7", &[(16, 16)]);
    let run = arch_run_patched(&p, &part, &c, DeclassTrace::from([1, 2, 3]), 10).unwrap();
    assert_eq!((run.config.mem.get(5), run.config.mem.get(16), run.config.mem.get(6)), (1, 8, 2));
    assert_eq!(run.decl, DeclassTrace::from([3]), "residual");
    assert_eq!(
        arch_run_patched(&p, &part, &c, DeclassTrace::from([1]), 10),
        Err(DeclassUnderflow { addr: 6 })
    );
}

#[test]
fn step_bound_stops_loops() {
    let (p, part, c) = setup("L:\nbeqz 0, L", &[]);
    let run = arch_run(&p, &part, &c, 25);
    assert_eq!(run.obs.len(), 25);
    assert!(!run.halted);
}

#[test]
fn bounds_check_holds_architecturally() {
    let g = get_gadget("spectre-pht").unwrap();
    let c = g.scenario().instantiate(&[99]);
    let run = arch_run(&g.program, &g.partition, &c, g.steps);
    assert_eq!(run.obs, [Observation::BranchOutcome(true)]);
    assert!(run.halted);
}

#[test]
fn scenario_validation() {
    let p = Arc::new(parse_program(".regs s, x\nx <- s").unwrap());
    let part = SecretPartition::new([(16, 16)]).unwrap();
    let init = ArchConfig::initial(&p);
    let dom = |site, v: Vec<u64>| BTreeMap::from([(site, v)]);
    assert_eq!(
        Scenario::new(p.clone(), part.clone(), init.clone(), dom(SecretSite::Mem(3), vec![1])).unwrap_err(),
        ScenarioError::PublicMemorySite(3)
    );
    assert!(matches!(
        Scenario::new(p.clone(), part.clone(), init.clone(), dom(SecretSite::Mem(16), vec![])),
        Err(ScenarioError::EmptyDomain(_))
    ));
    assert_eq!(
        Scenario::new(p.clone(), part.clone(), init.clone(), dom(SecretSite::Reg(Reg::PC), vec![0])).unwrap_err(),
        ScenarioError::SecretPc
    );
    let mut short = init.clone();
    short.reg.pop();
    assert!(matches!(
        Scenario::new(p.clone(), part.clone(), short, BTreeMap::new()),
        Err(ScenarioError::RegisterCount { .. })
    ));

    // A register labeled H gets the default domain; a register site is
    // labeled H.
    let s = p.reg("s").unwrap();
    let mut high = init.clone();
    high.set(s, LabeledValue::high(0));
    let sc = Scenario::new(p.clone(), part.clone(), high, BTreeMap::new()).unwrap();
    assert_eq!(sc.sites(), [(SecretSite::Reg(s), vec![0, 1])]);
    let sc = Scenario::new(p.clone(), part, init, dom(SecretSite::Reg(s), vec![4, 5])).unwrap();
    assert_eq!(sc.instantiate(&[5]).get(s), LabeledValue::high(5));
    assert_eq!(sc.describe(&[5]), BTreeMap::from([("reg:s".to_string(), 5)]));
}

#[test]
fn site_names_round_trip() {
    let p = parse_program(".regs s, x\nx <- s").unwrap();
    for site in [SecretSite::Mem(16), SecretSite::Reg(p.reg("s").unwrap())] {
        assert_eq!(SecretSite::parse(&site.name(&p), &p), Some(site));
    }
    assert_eq!(SecretSite::parse("reg:nope", &p), None);
    assert_eq!(SecretSite::parse("16", &p), None);
}

#[test]
fn small_domains_are_enumerated() {
    let sc = get_gadget("listing3").unwrap().scenario();
    let plan = sc.pair_plan(5, 0);
    assert!(plan.exhaustive);
    assert_eq!(plan.pairs.len(), 8 * 7 / 2);
    let big = get_gadget("spectre-pht").unwrap().scenario();
    const _: () = assert!(256 * 255 / 2 > EXHAUSTIVE_PAIR_LIMIT);
    let plan = big.pair_plan(50, 1);
    assert!(!plan.exhaustive);
    assert_eq!(plan.pairs.len(), 50);
    assert_eq!(plan, big.pair_plan(50, 1), "sampling is seeded");
}

#[test]
fn corpus_constant_time_preconditions() {
    for g in gadgets_tagged(GadgetTag::CtPlain) {
        let v = check_constant_time(&g.scenario(), g.steps, 300, 7);
        assert!(v.is_pass(), "{}: {v:?}", g.name);
    }
    for g in gadgets_tagged(GadgetTag::CtUpToDecl) {
        let v = check_ct_up_to_decl(&g.scenario(), g.steps, 300, 7);
        assert!(v.is_pass(), "{}: {v:?}", g.name);
    }
}

#[test]
fn declassifying_programs_are_not_plainly_constant_time() {
    let g = get_gadget("listing2").unwrap();
    match check_constant_time(&g.scenario(), g.steps, 300, 7) {
        CtVerdict::Fail(cx) => assert!(cx.reason.contains("declassified"), "{}", cx.reason),
        v => panic!("expected a counterexample, got {v:?}"),
    }
}

#[test]
fn secret_dependent_branch_is_caught() {
    let (p, part, mut c) = setup("x <- load 16\nbeqz x, End\ny <- 1\nEnd:", &[(16, 16)]);
    c.mem.set(16, 0);
    let sc = Scenario::new(p, part, c, BTreeMap::from([(SecretSite::Mem(16), vec![0, 1])])).unwrap();
    let CtVerdict::Fail(cx) = check_constant_time(&sc, 10, 10, 0) else {
        panic!("branch on a secret must fail")
    };
    assert_eq!(cx.step, 1);
    assert_eq!(cx.obs_a, Some(Observation::BranchOutcome(true)));
    assert_eq!(cx.obs_b, Some(Observation::BranchOutcome(false)));
    assert!(!check_ct_up_to_decl(&sc, 10, 10, 0).is_pass());
}

#[test]
fn declassified_secret_may_flow_up_to_declassification() {
    // The secret is declassified and then used as an address: constant-time
    // up to declassification, but not plainly constant-time.
    let src = "x <- load 16\nstore 100, x\ny <- load 100\nz <- load y";
    let (p, part, c) = setup(src, &[(16, 16)]);
    let sc = Scenario::new(p, part, c, BTreeMap::from([(SecretSite::Mem(16), vec![1, 2, 3])])).unwrap();
    assert!(!check_constant_time(&sc, 10, 10, 0).is_pass());
    assert!(check_ct_up_to_decl(&sc, 10, 10, 0).is_pass());
    assert_eq!(DECLASS_ADDR, 100);
    assert_eq!(SECRET_ADDR, 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Patching a run with its own declassification trace changes nothing
    /// and consumes the trace exactly.
    #[test]
    fn self_patching_is_identity(seed in any::<u64>(), len in 1usize..24) {
        let sc = common::random_case(seed, len, true);
        let c = sc.instantiate(&sc.random_assignment(&mut common::rng(seed ^ 1)));
        let plain = arch_run(&sc.program, &sc.partition, &c, 200);
        let patched = arch_run_patched(&sc.program, &sc.partition, &c, plain.decl.clone(), 200).unwrap();
        prop_assert_eq!(&patched.config, &plain.config);
        prop_assert_eq!(&patched.obs, &plain.obs);
        prop_assert!(patched.decl.is_empty());
    }

    /// Runs are deterministic and prefixes of longer runs.
    #[test]
    fn runs_are_prefix_closed(seed in any::<u64>(), len in 1usize..24, k in 0usize..60) {
        let sc = common::random_case(seed, len, true);
        let c = sc.instantiate(&sc.random_assignment(&mut common::rng(seed)));
        let long = arch_run(&sc.program, &sc.partition, &c, 60);
        let short = arch_run(&sc.program, &sc.partition, &c, k);
        prop_assert_eq!(&long.obs[..short.obs.len()], &short.obs[..]);
        prop_assert_eq!(arch_run(&sc.program, &sc.partition, &c, 60), long);
    }

    /// Values labeled L never depend on the secrets: two instantiations of a
    /// scenario agree on every public register at every step of a run whose
    /// observations agree.
    #[test]
    fn public_registers_agree_while_observations_agree(seed in any::<u64>(), len in 1usize..24) {
        let sc = common::random_case(seed, len, true);
        let mut rng = common::rng(seed ^ 2);
        let (mut a, mut b) = (
            sc.instantiate(&sc.random_assignment(&mut rng)),
            sc.instantiate(&sc.random_assignment(&mut rng)),
        );
        for _ in 0..60 {
            for (x, y) in a.reg.iter().zip(&b.reg) {
                prop_assert_eq!(x.level, y.level);
                if x.level == SecLevel::L {
                    prop_assert_eq!(x.value, y.value);
                }
            }
            let (sa, sb) = (arch_step(&sc.program, &sc.partition, &mut a), arch_step(&sc.program, &sc.partition, &mut b));
            let same = match (sa, sb) {
                (ArchStep::Step { obs: oa, decl: da }, ArchStep::Step { obs: ob, decl: db }) => oa == ob && da == db,
                (ArchStep::Halt, ArchStep::Halt) => false,
                _ => false,
            };
            if !same {
                break;
            }
        }
    }
}
