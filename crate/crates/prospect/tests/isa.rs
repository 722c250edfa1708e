mod common;

use prospect::isa::{
    parse_program, BinOp, Expr, Instruction, LabeledValue, ParseErrorKind, PartitionError, Reg,
    SecLevel, SecretPartition,
};
use proptest::prelude::*;

#[test]
fn labeled_value_helpers() {
    assert_eq!(LabeledValue::low(3), LabeledValue::new(3, SecLevel::L));
    assert!(LabeledValue::low(3).is_low());
    assert!(!LabeledValue::high(3).is_low());
}

#[test]
fn join_is_least_upper_bound() {
    use SecLevel::{H, L};
    assert_eq!(L.join(L), L);
    assert_eq!(L.join(H), H);
    assert_eq!(H.join(L), H);
    assert_eq!(H.join(H), H);
}

#[test]
fn operators_wrap_and_saturate_shifts() {
    assert_eq!(BinOp::Add.apply(u64::MAX, 1), 0);
    assert_eq!(BinOp::Sub.apply(0, 1), u64::MAX);
    assert_eq!(BinOp::Mul.apply(1 << 63, 2), 0);
    assert_eq!(BinOp::Shl.apply(1, 63), 1 << 63);
    assert_eq!(BinOp::Shl.apply(1, 64), 0);
    assert_eq!(BinOp::Shr.apply(u64::MAX, 1 << 40), 0);
    assert_eq!(BinOp::Eq.apply(4, 4), 1);
    assert_eq!(BinOp::Ult.apply(5, 4), 0);
}

#[test]
fn evaluation_joins_labels() {
    let p = parse_program(".regs x, y\nx <- x + y * 2").unwrap();
    let Some(Instruction::Mov(_, e)) = p.get(0) else { panic!() };
    let mut regs = vec![LabeledValue::low(0); 3];
    regs[1] = LabeledValue::low(1);
    regs[2] = LabeledValue::high(10);
    assert_eq!(e.eval_total(&regs), LabeledValue::high(21));
    regs[2] = LabeledValue::low(10);
    assert_eq!(e.eval_total(&regs), LabeledValue::low(21));
}

#[test]
fn evaluation_is_partial_over_unknown_registers() {
    let e = Expr::bin(BinOp::Add, Expr::Reg(Reg(1)), Expr::lit(1));
    let regs = [Some(LabeledValue::low(0)), None];
    assert_eq!(prospect::isa::eval_expr(&e, &regs), None);
}

#[test]
fn parses_every_instruction_form() {
    let p = parse_program(
        "// comment\n.regs x, y\nStart:\n  x <- 5\n  y <- load x + 1   // trailing\n  store x, y\n  beqz x, Start\n  jmp End\nEnd:\n",
    )
    .unwrap();
    let (x, y) = (p.reg("x").unwrap(), p.reg("y").unwrap());
    assert_eq!(p.len(), 5);
    assert_eq!(p.get(0), Some(&Instruction::Mov(x, Expr::lit(5))));
    assert_eq!(
        p.get(1),
        Some(&Instruction::Load(y, Expr::bin(BinOp::Add, Expr::Reg(x), Expr::lit(1))))
    );
    assert_eq!(p.get(2), Some(&Instruction::Store(Expr::Reg(x), Expr::Reg(y))));
    assert_eq!(p.get(3), Some(&Instruction::Beqz(Expr::Reg(x), 0)));
    assert_eq!(p.get(4), Some(&Instruction::Jmp(Expr::lit(5))));
    assert_eq!(p.get(5), None);
    assert_eq!(p.labels()["End"], 5);
}

#[test]
fn precedence_and_associativity() {
    let p = parse_program("x <- 1 + 2 * 3 - 4\ny <- 10 - 3 - 2\nz <- 1 | 2 & 3 == 3").unwrap();
    let regs = vec![LabeledValue::low(0); p.registers().len()];
    let val = |l| match p.get(l) {
        Some(Instruction::Mov(_, e)) => e.eval_total(&regs).value,
        _ => panic!(),
    };
    assert_eq!(val(0), 3);
    assert_eq!(val(1), 5);
    assert_eq!(val(2), 1 | (2 & u64::from(3 == 3)));
}

#[test]
fn hex_literals_and_ult() {
    let p = parse_program("x <- 0x10 ult 17").unwrap();
    let regs = vec![LabeledValue::low(0); 2];
    let Some(Instruction::Mov(_, e)) = p.get(0) else { panic!() };
    assert_eq!(e.eval_total(&regs).value, 1);
}

#[test]
fn implicit_registers_are_declared_by_use() {
    let p = parse_program("a <- b + c").unwrap();
    let names: Vec<&str> = p.registers().iter().map(|(_, n)| n).collect();
    assert_eq!(names, ["pc", "a", "b", "c"]);
}

#[test]
fn entry_directive() {
    let p = parse_program(".entry Main\nx <- 1\nMain:\nx <- 2").unwrap();
    assert_eq!(p.entry(), 1);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let err = |src: &str| parse_program(src).unwrap_err();
    let e = err("x <- 1\nx <- load\n");
    assert_eq!(e.line, 2);
    assert!(matches!(e.kind, ParseErrorKind::Syntax(_)));
    assert_eq!(err("A:\nA:\n").kind, ParseErrorKind::DuplicateLabel("A".into()));
    assert_eq!(err(".regs x\ny <- 1").kind, ParseErrorKind::UnknownRegister("y".into()));
    assert_eq!(err("beqz 0, Nowhere").kind, ParseErrorKind::UndefinedLabel("Nowhere".into()));
    assert_eq!(err("pc <- 3").kind, ParseErrorKind::AssignsPc);
    assert_eq!(err("pc <- load 3").kind, ParseErrorKind::AssignsPc);
}

#[test]
fn partition_levels_and_validation() {
    let part = SecretPartition::new([(16, 23), (100, 100)]).unwrap();
    assert_eq!(part.level(15), SecLevel::L);
    assert_eq!(part.level(16), SecLevel::H);
    assert_eq!(part.level(23), SecLevel::H);
    assert_eq!(part.level(24), SecLevel::L);
    assert_eq!(part.level(100), SecLevel::H);
    assert_eq!(SecretPartition::empty().level(16), SecLevel::L);
    assert_eq!(SecretPartition::new([(5, 4)]), Err(PartitionError::Inverted(5, 4)));
    assert!(matches!(
        SecretPartition::new([(0, 10), (10, 12)]),
        Err(PartitionError::Overlap(..))
    ));
}

#[test]
fn partition_serializes_as_pairs() {
    let part = SecretPartition::new([(16, 23)]).unwrap();
    let json = serde_json::to_string(&part).unwrap();
    assert_eq!(json, "[[16,23]]");
    assert_eq!(serde_json::from_str::<SecretPartition>(&json).unwrap(), part);
    assert!(serde_json::from_str::<SecretPartition>("[[3,1]]").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Printing a program and parsing it back yields the same program.
    #[test]
    fn print_parse_round_trip(seed in any::<u64>(), len in 0usize..24, control in any::<bool>()) {
        let p = common::random_program(&mut common::rng(seed), len, control);
        let text = p.to_string();
        let q = parse_program(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(q.instructions(), p.instructions(), "{}", text);
    }

    /// Every operator agrees with its definition on 64-bit words.
    #[test]
    fn operator_semantics(a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(BinOp::Add.apply(a, b), a.wrapping_add(b));
        prop_assert_eq!(BinOp::Xor.apply(a, b), a ^ b);
        prop_assert_eq!(BinOp::Ult.apply(a, b), u64::from(a < b));
        prop_assert_eq!(BinOp::Shr.apply(a, b), if b < 64 { a >> b } else { 0 });
    }

    /// The label of an expression is the join of the labels it reads.
    #[test]
    fn label_is_join_of_inputs(seed in any::<u64>(), high in proptest::collection::vec(any::<bool>(), 5)) {
        let mut rng = common::rng(seed);
        let e = common::random_expr(&mut rng, 3);
        let regs: Vec<LabeledValue> = (0..5u16)
            .map(|i| LabeledValue::new(u64::from(i) * 7, if high[i as usize] { SecLevel::H } else { SecLevel::L }))
            .collect();
        let secret_read = (1..5u16).any(|i| high[i as usize] && e.mentions(Reg(i)));
        let expected = if secret_read { SecLevel::H } else { SecLevel::L };
        prop_assert_eq!(e.eval_total(&regs).level, expected);
    }
}
