//! Shared generators for the integration tests: random μASM programs and
//! scenarios built from a seed, so that proptest only needs to shrink a `u64`.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use prospect::arch::{ArchConfig, Scenario, SecretSite};
use prospect::isa::{BinOp, Expr, Instruction, Program, Reg, RegisterTable, SecretPartition, Value};
use prospect::LabeledValue;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// General-purpose registers of generated programs (after `pc`).
pub const GPRS: [&str; 4] = ["a", "b", "c", "d"];

/// Secret memory of generated scenarios.
pub const SECRET_RANGE: (Value, Value) = (16, 23);

/// A deterministic generator for `seed`.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gpr(rng: &mut impl Rng) -> Reg {
    Reg(rng.gen_range(1..=GPRS.len() as u16))
}

/// A random expression over the general-purpose registers.
pub fn random_expr(rng: &mut impl Rng, depth: u32) -> Expr {
    if depth == 0 || rng.gen_bool(0.4) {
        if rng.gen_bool(0.5) {
            Expr::Reg(gpr(rng))
        } else {
            Expr::lit(rng.gen_range(0..40))
        }
    } else {
        let op = BinOp::ALL[rng.gen_range(0..BinOp::ALL.len())];
        Expr::bin(op, random_expr(rng, depth - 1), random_expr(rng, depth - 1))
    }
}

/// A random address expression; most addresses fall in `0..32` so that both
/// public and secret cells are touched.
pub fn random_addr(rng: &mut impl Rng) -> Expr {
    let e = random_expr(rng, 2);
    if rng.gen_bool(0.8) {
        Expr::bin(BinOp::And, e, Expr::lit(31))
    } else {
        e
    }
}

/// A random program of `len` instructions. Without `control`, it is
/// straight-line (no branches or jumps).
pub fn random_program(rng: &mut impl Rng, len: usize, control: bool) -> Program {
    let mut instrs = Vec::with_capacity(len);
    for l in 0..len {
        let kind = rng.gen_range(0..if control { 6 } else { 4 });
        instrs.push(match kind {
            0 | 1 => Instruction::Mov(gpr(rng), random_expr(rng, 2)),
            2 => Instruction::Load(gpr(rng), random_addr(rng)),
            3 => Instruction::Store(random_addr(rng), random_expr(rng, 2)),
            4 => Instruction::Beqz(
                random_expr(rng, 2),
                // Mostly forward, so that programs usually terminate.
                rng.gen_range((l as Value).saturating_sub(2)..=len as Value),
            ),
            _ => Instruction::Jmp(Expr::lit(rng.gen_range(l as Value + 1..=len as Value))),
        });
    }
    Program::new(instrs, RegisterTable::with_names(GPRS), BTreeMap::new(), 0)
        .expect("generated programs are well-formed")
}

/// A random scenario for `program`: secret memory `16..=23` with two secret
/// cells, and register `a` secret half of the time.
pub fn random_scenario(rng: &mut impl Rng, program: Program) -> Scenario {
    let program = Arc::new(program);
    let partition = SecretPartition::new([SECRET_RANGE]).expect("valid partition");
    let mut init = ArchConfig::initial(&program);
    for a in 0..32 {
        init.mem.set(a, rng.gen_range(0..40));
    }
    for i in 1..=GPRS.len() {
        init.reg[i] = LabeledValue::low(rng.gen_range(0..40));
    }
    let mut domains = BTreeMap::new();
    domains.insert(SecretSite::Mem(16), vec![0, 1, 7, 200]);
    domains.insert(SecretSite::Mem(19), vec![3, 31]);
    if rng.gen_bool(0.5) {
        domains.insert(SecretSite::Reg(Reg(1)), vec![0, 5, 17]);
    }
    Scenario::new(program, partition, init, domains).expect("valid scenario")
}

/// A random program together with a random scenario.
pub fn random_case(seed: u64, len: usize, control: bool) -> Scenario {
    let mut r = rng(seed);
    let p = random_program(&mut r, len, control);
    random_scenario(&mut r, p)
}
