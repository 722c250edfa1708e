//! The μASM instruction set: values, security levels, expressions,
//! instructions, programs, the memory secrecy partition and the concrete text
//! syntax.
//!
//! Everything in this module is pure data plus pure functions; both the
//! sequential semantics ([`crate::arch`]) and the speculative semantics
//! ([`crate::hardware`]) are built on top of [`Expr::eval`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A machine word. All arithmetic wraps around at 64 bits.
///
/// Program locations are values too: the location following `l` is `l + 1`.
pub type Value = u64;

/// A program location.
pub type Loc = Value;

/// A security level: public (`L`) or secret (`H`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SecLevel {
    /// Public.
    L,
    /// Secret.
    H,
}

impl SecLevel {
    /// Least upper bound: `L ⊔ L = L`, anything joined with `H` is `H`.
    #[inline]
    pub fn join(self, other: SecLevel) -> SecLevel {
        if self == SecLevel::H || other == SecLevel::H {
            SecLevel::H
        } else {
            SecLevel::L
        }
    }
}

impl fmt::Display for SecLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecLevel::L => f.write_str("L"),
            SecLevel::H => f.write_str("H"),
        }
    }
}

/// A value paired with its security level (written `v^s`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabeledValue {
    /// The machine word.
    pub value: Value,
    /// Its security label.
    pub level: SecLevel,
}

impl LabeledValue {
    /// A labeled value.
    #[inline]
    pub const fn new(value: Value, level: SecLevel) -> Self {
        LabeledValue { value, level }
    }

    /// A public value `v^L`.
    #[inline]
    pub const fn low(value: Value) -> Self {
        LabeledValue::new(value, SecLevel::L)
    }

    /// A secret value `v^H`.
    #[inline]
    pub const fn high(value: Value) -> Self {
        LabeledValue::new(value, SecLevel::H)
    }

    /// Whether the label is `L`.
    #[inline]
    pub fn is_low(&self) -> bool {
        self.level == SecLevel::L
    }
}

impl fmt::Display for LabeledValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}^{}", self.value, self.level)
    }
}

/// A possibly undefined labeled value; `None` is the undefined symbol `⊥`.
pub type MaybeValue = Option<LabeledValue>;

/// A register index into a program's [`RegisterTable`].
///
/// Index 0 is always the program counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Reg(pub u16);

impl Reg {
    /// The program counter.
    pub const PC: Reg = Reg(0);

    /// The register's position in register vectors.
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// The finite, declared set of register names of a program.
///
/// `pc` is always present at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RegisterTable {
    names: Vec<String>,
}

impl Default for RegisterTable {
    fn default() -> Self {
        RegisterTable {
            names: vec!["pc".to_string()],
        }
    }
}

impl RegisterTable {
    /// A table containing `pc` followed by `names` (duplicates are merged).
    pub fn with_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut table = RegisterTable::default();
        for name in names {
            table.intern(&name.into());
        }
        table
    }

    /// Looks a register up by name.
    pub fn get(&self, name: &str) -> Option<Reg> {
        self.names.iter().position(|n| n == name).map(|i| Reg(i as u16))
    }

    /// Returns the register called `name`, declaring it if necessary.
    pub fn intern(&mut self, name: &str) -> Reg {
        match self.get(name) {
            Some(r) => r,
            None => {
                self.names.push(name.to_string());
                Reg((self.names.len() - 1) as u16)
            }
        }
    }

    /// The name of `r`.
    pub fn name(&self, r: Reg) -> &str {
        &self.names[r.index()]
    }

    /// Number of registers, including `pc`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    /// Always false: `pc` is always declared.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Iterates over `(register, name)` pairs in index order.
    pub fn iter(&self) -> impl Iterator<Item = (Reg, &str)> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (Reg(i as u16), n.as_str()))
    }
}

/// Binary operators. All are constant-time unless a hardware configuration
/// flags them as variable-time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinOp {
    /// Wrapping addition (`+`).
    Add,
    /// Wrapping subtraction (`-`).
    Sub,
    /// Wrapping multiplication (`*`).
    Mul,
    /// Bitwise and (`&`).
    And,
    /// Bitwise or (`|`).
    Or,
    /// Bitwise exclusive or (`^`).
    Xor,
    /// Left shift (`<<`); shifting by 64 or more yields 0.
    Shl,
    /// Logical right shift (`>>`); shifting by 64 or more yields 0.
    Shr,
    /// Equality (`==`), 1 if equal and 0 otherwise.
    Eq,
    /// Unsigned less-than (`ult`), 1 if true and 0 otherwise.
    Ult,
}

impl BinOp {
    /// All operators, in declaration order.
    pub const ALL: [BinOp; 10] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
        BinOp::Eq,
        BinOp::Ult,
    ];

    /// Applies the operator to two words.
    #[inline]
    pub fn apply(self, a: Value, b: Value) -> Value {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => u32::try_from(b)
                .ok()
                .and_then(|s| a.checked_shl(s))
                .unwrap_or(0),
            BinOp::Shr => u32::try_from(b)
                .ok()
                .and_then(|s| a.checked_shr(s))
                .unwrap_or(0),
            BinOp::Eq => (a == b) as Value,
            BinOp::Ult => (a < b) as Value,
        }
    }

    /// The operator's concrete syntax.
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Xor => "^",
            BinOp::Shl => "<<",
            BinOp::Shr => ">>",
            BinOp::Eq => "==",
            BinOp::Ult => "ult",
        }
    }

    /// Binding strength used by the parser and printer (higher binds tighter).
    fn precedence(self) -> u8 {
        match self {
            BinOp::Mul => 7,
            BinOp::Add | BinOp::Sub => 6,
            BinOp::Shl | BinOp::Shr => 5,
            BinOp::Ult => 4,
            BinOp::Eq => 3,
            BinOp::And => 2,
            BinOp::Xor => 1,
            BinOp::Or => 0,
        }
    }
}

/// An expression tree.
///
/// The leaf type `V` is a [`LabeledValue`] for executable expressions and a
/// [`MaybeValue`] for low-projected expressions, in which secret literals have
/// been replaced by `⊥`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr<V = LabeledValue> {
    /// A literal.
    Val(V),
    /// A register read.
    Reg(Reg),
    /// A binary operation.
    Bin(BinOp, Box<Expr<V>>, Box<Expr<V>>),
}

impl Expr {
    /// A public literal.
    pub fn lit(v: Value) -> Expr {
        Expr::Val(LabeledValue::low(v))
    }

    /// A binary operation.
    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    /// Evaluates the expression under a (possibly partial) register map.
    ///
    /// The result is undefined as soon as any referenced register is
    /// undefined; otherwise it is the wrap-around result labeled with the join
    /// of the operand labels.
    pub fn eval<F>(&self, reg: &F) -> MaybeValue
    where
        F: Fn(Reg) -> MaybeValue + ?Sized,
    {
        match self {
            Expr::Val(v) => Some(*v),
            Expr::Reg(r) => reg(*r),
            Expr::Bin(op, a, b) => {
                let a = a.eval(reg)?;
                let b = b.eval(reg)?;
                Some(LabeledValue::new(
                    op.apply(a.value, b.value),
                    a.level.join(b.level),
                ))
            }
        }
    }

    /// Evaluates the expression under a total register map.
    pub fn eval_total(&self, reg: &[LabeledValue]) -> LabeledValue {
        match self {
            Expr::Val(v) => *v,
            Expr::Reg(r) => reg[r.index()],
            Expr::Bin(op, a, b) => {
                let a = a.eval_total(reg);
                let b = b.eval_total(reg);
                LabeledValue::new(op.apply(a.value, b.value), a.level.join(b.level))
            }
        }
    }

    /// The literal, if the expression is already a value.
    #[inline]
    pub fn as_value(&self) -> Option<LabeledValue> {
        match self {
            Expr::Val(v) => Some(*v),
            _ => None,
        }
    }

    /// Whether any operator in the tree satisfies `pred`.
    pub fn any_op(&self, pred: &dyn Fn(BinOp) -> bool) -> bool {
        match self {
            Expr::Val(_) | Expr::Reg(_) => false,
            Expr::Bin(op, a, b) => pred(*op) || a.any_op(pred) || b.any_op(pred),
        }
    }
}

impl<V> Expr<V> {
    /// Rebuilds the tree with every literal transformed by `f`.
    pub fn map_values<W>(&self, f: &dyn Fn(&V) -> W) -> Expr<W> {
        match self {
            Expr::Val(v) => Expr::Val(f(v)),
            Expr::Reg(r) => Expr::Reg(*r),
            Expr::Bin(op, a, b) => {
                Expr::Bin(*op, Box::new(a.map_values(f)), Box::new(b.map_values(f)))
            }
        }
    }

    /// Whether the tree mentions register `r`.
    pub fn mentions(&self, r: Reg) -> bool {
        match self {
            Expr::Val(_) => false,
            Expr::Reg(q) => *q == r,
            Expr::Bin(_, a, b) => a.mentions(r) || b.mentions(r),
        }
    }
}

/// A μASM instruction. No instruction assigns `pc` directly.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    /// `x <- e`
    Mov(Reg, Expr),
    /// `jmp e`
    Jmp(Expr),
    /// `beqz e, l`: jump to `l` if `e` evaluates to 0, fall through otherwise.
    Beqz(Expr, Loc),
    /// `x <- load e`
    Load(Reg, Expr),
    /// `store e_addr, e_val`
    Store(Expr, Expr),
}

/// A program: instructions at consecutive locations `0..len`, register names
/// and the labels used in its listing.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Program {
    instrs: Vec<Instruction>,
    regs: RegisterTable,
    labels: BTreeMap<String, Loc>,
    entry: Loc,
}

/// Error building a [`Program`] programmatically.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgramError {
    /// An instruction writes `pc`.
    #[error("instruction at location {0} assigns pc directly")]
    AssignsPc(Loc),
    /// An instruction mentions a register index outside the table.
    #[error("instruction at location {0} mentions an undeclared register")]
    UnknownRegister(Loc),
    /// The entry point is neither a location of the program nor its end.
    #[error("entry point {0} is outside the program")]
    BadEntry(Loc),
}

impl Program {
    /// Builds a program, checking that no instruction assigns `pc` and that all
    /// registers are declared.
    pub fn new(
        instrs: Vec<Instruction>,
        regs: RegisterTable,
        labels: BTreeMap<String, Loc>,
        entry: Loc,
    ) -> Result<Program, ProgramError> {
        let nregs = regs.len();
        let in_table = |e: &Expr| !expr_regs(e).any(|r| r.index() >= nregs);
        for (l, ins) in instrs.iter().enumerate() {
            let l = l as Loc;
            let ok = match ins {
                Instruction::Mov(x, e) | Instruction::Load(x, e) => {
                    if *x == Reg::PC {
                        return Err(ProgramError::AssignsPc(l));
                    }
                    x.index() < nregs && in_table(e)
                }
                Instruction::Jmp(e) | Instruction::Beqz(e, _) => in_table(e),
                Instruction::Store(a, v) => in_table(a) && in_table(v),
            };
            if !ok {
                return Err(ProgramError::UnknownRegister(l));
            }
        }
        if entry > instrs.len() as Loc {
            return Err(ProgramError::BadEntry(entry));
        }
        Ok(Program {
            instrs,
            regs,
            labels,
            entry,
        })
    }

    /// The instruction at `l`, if any (`p[l]` is undefined outside the map).
    #[inline]
    pub fn get(&self, l: Loc) -> Option<&Instruction> {
        usize::try_from(l).ok().and_then(|i| self.instrs.get(i))
    }

    /// Number of instructions.
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    /// Whether the program has no instructions.
    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    /// Instructions in location order.
    pub fn instructions(&self) -> &[Instruction] {
        &self.instrs
    }

    /// The register table.
    pub fn registers(&self) -> &RegisterTable {
        &self.regs
    }

    /// Labels of the listing, by name.
    pub fn labels(&self) -> &BTreeMap<String, Loc> {
        &self.labels
    }

    /// The location execution starts at.
    pub fn entry(&self) -> Loc {
        self.entry
    }

    /// Looks a register up by name.
    pub fn reg(&self, name: &str) -> Option<Reg> {
        self.regs.get(name)
    }
}

fn expr_regs(e: &Expr) -> impl Iterator<Item = Reg> {
    fn walk(e: &Expr, out: &mut Vec<Reg>) {
        match e {
            Expr::Val(_) => {}
            Expr::Reg(r) => out.push(*r),
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

/// The memory secrecy partition: a fixed set of disjoint address intervals
/// labeled `H`; every other address is `L`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<[Value; 2]>", into = "Vec<[Value; 2]>")]
pub struct SecretPartition {
    ranges: Vec<(Value, Value)>,
}

/// Error constructing a [`SecretPartition`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PartitionError {
    /// An interval with `lo > hi`.
    #[error("secret range [{0}, {1}] is empty (lo > hi)")]
    Inverted(Value, Value),
    /// Two intervals share an address.
    #[error("secret ranges [{0}, {1}] and [{2}, {3}] overlap")]
    Overlap(Value, Value, Value, Value),
}

impl SecretPartition {
    /// The partition in which every address is public.
    pub fn empty() -> Self {
        SecretPartition::default()
    }

    /// Builds a partition from inclusive `[lo, hi]` intervals.
    pub fn new<I>(ranges: I) -> Result<Self, PartitionError>
    where
        I: IntoIterator<Item = (Value, Value)>,
    {
        let mut ranges: Vec<(Value, Value)> = ranges.into_iter().collect();
        for &(lo, hi) in &ranges {
            if lo > hi {
                return Err(PartitionError::Inverted(lo, hi));
            }
        }
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 <= w[0].1 {
                return Err(PartitionError::Overlap(w[0].0, w[0].1, w[1].0, w[1].1));
            }
        }
        Ok(SecretPartition { ranges })
    }

    /// The sorted intervals.
    pub fn ranges(&self) -> &[(Value, Value)] {
        &self.ranges
    }

    /// The security level `ξ(a)` of address `a`.
    #[inline]
    pub fn level(&self, a: Value) -> SecLevel {
        if memsec_ranges(&self.ranges, a) {
            SecLevel::H
        } else {
            SecLevel::L
        }
    }
}

#[inline]
fn memsec_ranges(ranges: &[(Value, Value)], a: Value) -> bool {
    // Partitions are tiny; a linear scan beats a binary search in practice.
    ranges.iter().any(|&(lo, hi)| lo <= a && a <= hi)
}

impl TryFrom<Vec<[Value; 2]>> for SecretPartition {
    type Error = PartitionError;
    fn try_from(v: Vec<[Value; 2]>) -> Result<Self, Self::Error> {
        SecretPartition::new(v.into_iter().map(|[lo, hi]| (lo, hi)))
    }
}

impl From<SecretPartition> for Vec<[Value; 2]> {
    fn from(p: SecretPartition) -> Self {
        p.ranges.into_iter().map(|(lo, hi)| [lo, hi]).collect()
    }
}

/// `ξ(a)`: the security level of address `a` under `part`.
pub fn memsec(part: &SecretPartition, a: Value) -> SecLevel {
    part.level(a)
}

/// Evaluates `e` under a partial register map given as a slice indexed by
/// register.
pub fn eval_expr(e: &Expr, reg: &[MaybeValue]) -> MaybeValue {
    e.eval(&|r: Reg| reg.get(r.index()).copied().flatten())
}

// ---------------------------------------------------------------------------
// Concrete syntax
// ---------------------------------------------------------------------------

/// What went wrong while parsing a listing.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    /// The line does not match the grammar.
    #[error("syntax error: {0}")]
    Syntax(String),
    /// A label is defined twice.
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    /// A register is used but `.regs` does not declare it.
    #[error("unknown register `{0}`")]
    UnknownRegister(String),
    /// A branch or `.entry` refers to a label that is never defined.
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    /// An instruction writes `pc`.
    #[error("pc cannot be assigned directly")]
    AssignsPc,
    /// A name is declared both as a label and as a register.
    #[error("`{0}` is declared both as a register and as a label")]
    NameClash(String),
}

/// A parse error with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    /// 1-based line of the listing.
    pub line: usize,
    /// The error.
    pub kind: ParseErrorKind,
}

const KEYWORDS: [&str; 5] = ["load", "store", "jmp", "beqz", "ult"];

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(Value),
    Arrow,
    Comma,
    Colon,
    LParen,
    RParen,
    Op(BinOp),
}

fn tokenize(line: &str) -> Result<Vec<Tok>, String> {
    let b = line.as_bytes();
    let mut i = 0;
    let mut out = Vec::new();
    while i < b.len() {
        let c = b[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' || c == '.' {
            let start = i;
            i += 1;
            while i < b.len() && ((b[i] as char).is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            let word = &line[start..i];
            if word == "ult" {
                out.push(Tok::Op(BinOp::Ult));
            } else {
                out.push(Tok::Ident(word.to_string()));
            }
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < b.len() && (b[i] as char).is_ascii_alphanumeric() {
                i += 1;
            }
            let word = &line[start..i];
            let parsed = if let Some(hex) = word.strip_prefix("0x").or_else(|| word.strip_prefix("0X")) {
                Value::from_str_radix(hex, 16)
            } else {
                word.parse::<Value>()
            };
            out.push(Tok::Int(
                parsed.map_err(|_| format!("invalid integer literal `{word}`"))?,
            ));
            continue;
        }
        let two = if i + 1 < b.len() { &line[i..i + 2] } else { "" };
        let (tok, len) = match two {
            "<-" => (Tok::Arrow, 2),
            "<<" => (Tok::Op(BinOp::Shl), 2),
            ">>" => (Tok::Op(BinOp::Shr), 2),
            "==" => (Tok::Op(BinOp::Eq), 2),
            _ => match c {
                ',' => (Tok::Comma, 1),
                ':' => (Tok::Colon, 1),
                '(' => (Tok::LParen, 1),
                ')' => (Tok::RParen, 1),
                '+' => (Tok::Op(BinOp::Add), 1),
                '-' => (Tok::Op(BinOp::Sub), 1),
                '*' => (Tok::Op(BinOp::Mul), 1),
                '&' => (Tok::Op(BinOp::And), 1),
                '|' => (Tok::Op(BinOp::Or), 1),
                '^' => (Tok::Op(BinOp::Xor), 1),
                _ => return Err(format!("unexpected character `{c}`")),
            },
        };
        out.push(tok);
        i += len;
    }
    Ok(out)
}

/// Resolves identifiers while parsing instruction operands.
struct Scope<'a> {
    labels: &'a BTreeMap<String, Loc>,
    regs: &'a mut RegisterTable,
    /// Whether `.regs` fixed the register set (otherwise registers are
    /// declared implicitly by use).
    declared: bool,
}

impl Scope<'_> {
    fn ident(&mut self, name: &str) -> Result<Expr, ParseErrorKind> {
        if let Some(&l) = self.labels.get(name) {
            return Ok(Expr::lit(l));
        }
        Ok(Expr::Reg(self.register(name)?))
    }

    fn register(&mut self, name: &str) -> Result<Reg, ParseErrorKind> {
        if KEYWORDS.contains(&name) || name.starts_with('.') {
            return Err(ParseErrorKind::Syntax(format!(
                "`{name}` cannot be used as a register"
            )));
        }
        if self.labels.contains_key(name) {
            return Err(ParseErrorKind::NameClash(name.to_string()));
        }
        match self.regs.get(name) {
            Some(r) => Ok(r),
            None if self.declared => Err(ParseErrorKind::UnknownRegister(name.to_string())),
            None => Ok(self.regs.intern(name)),
        }
    }
}

struct Cursor<'t> {
    toks: &'t [Tok],
    pos: usize,
}

impl<'t> Cursor<'t> {
    fn peek(&self) -> Option<&'t Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<&'t Tok> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<(), ParseErrorKind> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            Some(t) => Err(ParseErrorKind::Syntax(format!("expected {what}, found {t:?}"))),
            None => Err(ParseErrorKind::Syntax(format!("expected {what}, found end of line"))),
        }
    }

    fn done(&self) -> Result<(), ParseErrorKind> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(ParseErrorKind::Syntax(format!("unexpected trailing {t:?}"))),
        }
    }

    /// Precedence-climbing expression parser; all operators are left
    /// associative.
    fn expr(&mut self, scope: &mut Scope<'_>, min_prec: u8) -> Result<Expr, ParseErrorKind> {
        let mut lhs = self.atom(scope)?;
        while let Some(Tok::Op(op)) = self.peek() {
            let prec = op.precedence();
            if prec < min_prec {
                break;
            }
            self.pos += 1;
            let rhs = self.expr(scope, prec + 1)?;
            lhs = Expr::bin(*op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn atom(&mut self, scope: &mut Scope<'_>) -> Result<Expr, ParseErrorKind> {
        match self.next() {
            Some(Tok::Int(v)) => Ok(Expr::lit(*v)),
            Some(Tok::Ident(name)) => scope.ident(name),
            Some(Tok::LParen) => {
                let e = self.expr(scope, 0)?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(t) => Err(ParseErrorKind::Syntax(format!("expected an operand, found {t:?}"))),
            None => Err(ParseErrorKind::Syntax("expected an operand, found end of line".into())),
        }
    }

    fn target(&mut self, labels: &BTreeMap<String, Loc>) -> Result<Loc, ParseErrorKind> {
        match self.next() {
            Some(Tok::Int(v)) => Ok(*v),
            Some(Tok::Ident(name)) => labels
                .get(name.as_str())
                .copied()
                .ok_or_else(|| ParseErrorKind::UndefinedLabel(name.clone())),
            Some(t) => Err(ParseErrorKind::Syntax(format!("expected a branch target, found {t:?}"))),
            None => Err(ParseErrorKind::Syntax("expected a branch target".into())),
        }
    }
}

/// One source line after label extraction.
struct SourceLine {
    number: usize,
    toks: Vec<Tok>,
}

/// Parses a μASM listing.
///
/// One instruction per line; `Name:` defines a label for the next location;
/// `//` starts a comment; `.regs a, b, c` fixes the register set (otherwise
/// registers are declared by use) and `.entry Label` sets the entry point
/// (default 0). Identifiers in operand position resolve to labels first and
/// registers otherwise.
///
/// ```
/// use prospect::isa::{parse_program, Instruction, Expr};
/// let p = parse_program("x <- 5").unwrap();
/// let x = p.reg("x").unwrap();
/// assert_eq!(p.get(0), Some(&Instruction::Mov(x, Expr::lit(5))));
/// ```
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let err = |line: usize, kind: ParseErrorKind| ParseError { line, kind };

    // Pass 1: tokenize, collect labels and directives.
    let mut labels: BTreeMap<String, Loc> = BTreeMap::new();
    let mut lines: Vec<SourceLine> = Vec::new();
    let mut regs = RegisterTable::default();
    let mut declared = false;
    let mut entry_name: Option<(usize, Tok)> = None;
    for (idx, raw) in text.lines().enumerate() {
        let number = idx + 1;
        let code = raw.split("//").next().unwrap_or("");
        let mut toks = tokenize(code).map_err(|m| err(number, ParseErrorKind::Syntax(m)))?;
        if let Some(Tok::Ident(d)) = toks.first() {
            match d.as_str() {
                ".regs" => {
                    declared = true;
                    let mut expect_name = true;
                    for t in &toks[1..] {
                        match (expect_name, t) {
                            (true, Tok::Ident(n)) if !KEYWORDS.contains(&n.as_str()) && n != "pc" => {
                                regs.intern(n);
                                expect_name = false;
                            }
                            (false, Tok::Comma) => expect_name = true,
                            _ => {
                                return Err(err(
                                    number,
                                    ParseErrorKind::Syntax("malformed `.regs` directive".into()),
                                ))
                            }
                        }
                    }
                    continue;
                }
                ".entry" => {
                    if toks.len() != 2 || entry_name.is_some() {
                        return Err(err(
                            number,
                            ParseErrorKind::Syntax("malformed or repeated `.entry` directive".into()),
                        ));
                    }
                    entry_name = Some((number, toks[1].clone()));
                    continue;
                }
                d if d.starts_with('.') => {
                    return Err(err(
                        number,
                        ParseErrorKind::Syntax(format!("unknown directive `{d}`")),
                    ))
                }
                _ => {}
            }
        }
        while let [Tok::Ident(name), Tok::Colon, ..] = toks.as_slice() {
            if KEYWORDS.contains(&name.as_str()) || name == "pc" {
                return Err(err(
                    number,
                    ParseErrorKind::Syntax(format!("`{name}` cannot be used as a label")),
                ));
            }
            let here = lines.len() as Loc;
            if labels.insert(name.clone(), here).is_some() {
                return Err(err(number, ParseErrorKind::DuplicateLabel(name.clone())));
            }
            toks.drain(..2);
        }
        if !toks.is_empty() {
            lines.push(SourceLine { number, toks });
        }
    }
    if declared {
        for name in labels.keys() {
            if regs.get(name).is_some() {
                let line = lines.first().map_or(1, |l| l.number);
                return Err(err(line, ParseErrorKind::NameClash(name.clone())));
            }
        }
    }

    // Pass 2: instructions.
    let mut instrs = Vec::with_capacity(lines.len());
    let mut scope = Scope {
        labels: &labels,
        regs: &mut regs,
        declared,
    };
    for line in &lines {
        let ins = parse_instruction(&line.toks, &mut scope).map_err(|k| err(line.number, k))?;
        instrs.push(ins);
    }

    let entry = match entry_name {
        None => 0,
        Some((_, Tok::Int(v))) => v,
        Some((number, Tok::Ident(name))) => *labels
            .get(&name)
            .ok_or_else(|| err(number, ParseErrorKind::UndefinedLabel(name.clone())))?,
        Some((number, _)) => {
            return Err(err(number, ParseErrorKind::Syntax("malformed `.entry` directive".into())))
        }
    };
    let last_line = text.lines().count().max(1);
    Program::new(instrs, regs, labels, entry).map_err(|e| {
        err(last_line, ParseErrorKind::Syntax(e.to_string()))
    })
}

fn parse_instruction(toks: &[Tok], scope: &mut Scope<'_>) -> Result<Instruction, ParseErrorKind> {
    let mut c = Cursor { toks, pos: 0 };
    let ins = match c.peek() {
        Some(Tok::Ident(kw)) if kw == "jmp" => {
            c.pos += 1;
            Instruction::Jmp(c.expr(scope, 0)?)
        }
        Some(Tok::Ident(kw)) if kw == "beqz" => {
            c.pos += 1;
            let e = c.expr(scope, 0)?;
            c.expect(&Tok::Comma, "`,`")?;
            Instruction::Beqz(e, c.target(scope.labels)?)
        }
        Some(Tok::Ident(kw)) if kw == "store" => {
            c.pos += 1;
            let a = c.expr(scope, 0)?;
            c.expect(&Tok::Comma, "`,`")?;
            Instruction::Store(a, c.expr(scope, 0)?)
        }
        Some(Tok::Ident(name)) => {
            c.pos += 1;
            if name == "pc" {
                return Err(ParseErrorKind::AssignsPc);
            }
            c.expect(&Tok::Arrow, "`<-`")?;
            let x = scope.register(name)?;
            if matches!(c.peek(), Some(Tok::Ident(kw)) if kw == "load") {
                c.pos += 1;
                Instruction::Load(x, c.expr(scope, 0)?)
            } else {
                Instruction::Mov(x, c.expr(scope, 0)?)
            }
        }
        Some(t) => return Err(ParseErrorKind::Syntax(format!("expected an instruction, found {t:?}"))),
        None => return Err(ParseErrorKind::Syntax("empty instruction".into())),
    };
    c.done()?;
    Ok(ins)
}

// ---------------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------------

/// Displays an expression with register names from a table.
pub struct ExprDisplay<'a, V> {
    expr: &'a Expr<V>,
    regs: &'a RegisterTable,
}

/// Formats a literal inside an expression.
pub trait LiteralFmt {
    /// Writes the literal.
    fn fmt_literal(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result;
}

impl LiteralFmt for LabeledValue {
    fn fmt_literal(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.level {
            SecLevel::L => write!(f, "{}", self.value),
            SecLevel::H => write!(f, "{}^H", self.value),
        }
    }
}

impl LiteralFmt for MaybeValue {
    fn fmt_literal(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Some(v) => v.fmt_literal(f),
            None => f.write_str("⊥"),
        }
    }
}

impl<V: LiteralFmt> ExprDisplay<'_, V> {
    fn write(&self, e: &Expr<V>, f: &mut fmt::Formatter<'_>, parent: Option<u8>) -> fmt::Result {
        match e {
            Expr::Val(v) => v.fmt_literal(f),
            Expr::Reg(r) => f.write_str(self.regs.name(*r)),
            Expr::Bin(op, a, b) => {
                let prec = op.precedence();
                let paren = parent.is_some_and(|p| p >= prec);
                if paren {
                    f.write_str("(")?;
                }
                // Left operands of the same precedence need no parentheses
                // (left associativity); right operands always do.
                self.write(a, f, prec.checked_sub(1))?;
                write!(f, " {} ", op.symbol())?;
                self.write(b, f, Some(prec))?;
                if paren {
                    f.write_str(")")?;
                }
                Ok(())
            }
        }
    }
}

impl<V: LiteralFmt> fmt::Display for ExprDisplay<'_, V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write(self.expr, f, None)
    }
}

impl<V> Expr<V> {
    /// A [`fmt::Display`] adapter using `regs` for register names.
    pub fn display<'a>(&'a self, regs: &'a RegisterTable) -> ExprDisplay<'a, V> {
        ExprDisplay { expr: self, regs }
    }
}

impl Instruction {
    /// Renders the instruction in concrete syntax.
    pub fn to_source(&self, regs: &RegisterTable) -> String {
        match self {
            Instruction::Mov(x, e) => format!("{} <- {}", regs.name(*x), e.display(regs)),
            Instruction::Jmp(e) => format!("jmp {}", e.display(regs)),
            Instruction::Beqz(e, l) => format!("beqz {}, {}", e.display(regs), l),
            Instruction::Load(x, e) => format!("{} <- load {}", regs.name(*x), e.display(regs)),
            Instruction::Store(a, v) => format!("store {}, {}", a.display(regs), v.display(regs)),
        }
    }
}

impl fmt::Display for Program {
    /// Prints a listing that [`parse_program`] reads back as an equal program.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.regs.iter().skip(1).map(|(_, n)| n).collect();
        if !names.is_empty() {
            writeln!(f, ".regs {}", names.join(", "))?;
        }
        if self.entry != 0 {
            writeln!(f, ".entry {}", self.entry)?;
        }
        let mut by_loc: BTreeMap<Loc, Vec<&str>> = BTreeMap::new();
        for (name, &l) in &self.labels {
            by_loc.entry(l).or_default().push(name);
        }
        for (l, ins) in self.instrs.iter().enumerate() {
            for name in by_loc.remove(&(l as Loc)).unwrap_or_default() {
                writeln!(f, "{name}:")?;
            }
            writeln!(f, "    {}", ins.to_source(&self.regs))?;
        }
        // Labels at or past the end of the listing.
        for names in by_loc.values() {
            for name in names {
                writeln!(f, "{name}:")?;
            }
        }
        Ok(())
    }
}
