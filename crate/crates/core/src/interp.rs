//! Reference interpreter for the integer subset of Smali.
//!
//! Covers `const*`, `move`, 32-bit int arithmetic (three-address, `/2addr`,
//! `/lit8`, `/lit16`), `neg-int`/`not-int`, `if-*`, `goto*`, `nop` and
//! `return`. Only static methods whose arguments and result are int-like are
//! supported. Anything else is reported as [`EvalError::Unsupported`] so the
//! equivalence check abstains instead of guessing.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::smali::{parameter_types, return_type, LineKind, SmaliMethod};

pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("step budget of {0} exhausted")]
    NonTermination(u64),
    #[error("read of uninitialized register v{0}")]
    Uninitialized(u32),
    #[error("expected {expected} arguments, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("integer division by zero")]
    DivideByZero,
    #[error("execution fell off the end of the method")]
    FellThrough,
}

impl EvalError {
    pub fn is_unsupported(&self) -> bool {
        matches!(self, EvalError::Unsupported(_) | EvalError::Arity { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Rsub,
    Mul,
    Div,
    Rem,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Ushr,
}

impl BinOp {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "add" => BinOp::Add,
            "sub" => BinOp::Sub,
            "rsub" => BinOp::Rsub,
            "mul" => BinOp::Mul,
            "div" => BinOp::Div,
            "rem" => BinOp::Rem,
            "and" => BinOp::And,
            "or" => BinOp::Or,
            "xor" => BinOp::Xor,
            "shl" => BinOp::Shl,
            "shr" => BinOp::Shr,
            "ushr" => BinOp::Ushr,
            _ => return None,
        })
    }

    fn apply(self, a: i32, b: i32) -> Result<i32, EvalError> {
        Ok(match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Rsub => b.wrapping_sub(a),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Div if b == 0 => return Err(EvalError::DivideByZero),
            BinOp::Div => a.wrapping_div(b),
            BinOp::Rem if b == 0 => return Err(EvalError::DivideByZero),
            BinOp::Rem => a.wrapping_rem(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a.wrapping_shl(b as u32 & 0x1f),
            BinOp::Shr => a.wrapping_shr(b as u32 & 0x1f),
            BinOp::Ushr => ((a as u32) >> (b as u32 & 0x1f)) as i32,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
    Gt,
    Le,
}

impl Cond {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "eq" => Cond::Eq,
            "ne" => Cond::Ne,
            "lt" => Cond::Lt,
            "ge" => Cond::Ge,
            "gt" => Cond::Gt,
            "le" => Cond::Le,
            _ => return None,
        })
    }

    fn holds(self, a: i32, b: i32) -> bool {
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
            Cond::Lt => a < b,
            Cond::Ge => a >= b,
            Cond::Gt => a > b,
            Cond::Le => a <= b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Op {
    Nop,
    Const {
        dst: u32,
        value: i32,
    },
    Move {
        dst: u32,
        src: u32,
    },
    Bin {
        op: BinOp,
        dst: u32,
        a: u32,
        b: u32,
    },
    BinLit {
        op: BinOp,
        dst: u32,
        a: u32,
        lit: i32,
    },
    Neg {
        dst: u32,
        src: u32,
    },
    Not {
        dst: u32,
        src: u32,
    },
    If {
        cond: Cond,
        a: u32,
        b: u32,
        target: String,
    },
    IfZ {
        cond: Cond,
        a: u32,
        target: String,
    },
    Goto {
        target: String,
    },
    Return {
        src: u32,
    },
}

/// Parses a Smali integer literal (`10`, `-0x1`, `0xA`, `0x7fffffff`).
pub fn parse_int_literal(tok: &str) -> Option<i64> {
    let t = tok.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t),
    };
    let body = body.trim_end_matches(['t', 's', 'L']);
    let v = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(hex) => i64::from_str_radix(hex, 16).ok()?,
        None => body.parse::<i64>().ok()?,
    };
    Some(if neg { -v } else { v })
}

struct Program {
    ops: Vec<Op>,
    labels: HashMap<String, usize>,
    registers: u32,
    first_arg: u32,
    arity: usize,
}

fn unsupported(what: impl Into<String>) -> EvalError {
    EvalError::Unsupported(what.into())
}

fn decode(method: &SmaliMethod) -> Result<Program, EvalError> {
    if !method.is_static() {
        return Err(unsupported("instance method"));
    }
    let params = parameter_types(&method.descriptor)
        .ok_or_else(|| unsupported(format!("descriptor {}", method.descriptor)))?;
    let int_like = |t: &str| matches!(t, "I" | "Z" | "B" | "S" | "C");
    if !params.iter().all(|p| int_like(p)) {
        return Err(unsupported("non-int parameter"));
    }
    if !return_type(&method.descriptor).is_some_and(int_like) {
        return Err(unsupported("non-int return type"));
    }
    let registers = method
        .registers_declared
        .ok_or_else(|| unsupported("no register directive"))?;
    let first_arg = method
        .local_registers()
        .ok_or_else(|| unsupported("frame smaller than its arguments"))?;

    let reg = |tok: &str| -> Result<u32, EvalError> {
        let idx = method
            .register_index(tok)
            .ok_or_else(|| unsupported(format!("operand `{tok}` is not a register")))?;
        if idx >= registers {
            return Err(unsupported(format!("register {tok} outside frame")));
        }
        Ok(idx)
    };
    let lit = |tok: &str| -> Result<i64, EvalError> {
        parse_int_literal(tok).ok_or_else(|| unsupported(format!("literal `{tok}`")))
    };
    let label = |tok: &str| -> Result<String, EvalError> {
        tok.strip_prefix(':')
            .map(str::to_string)
            .ok_or_else(|| unsupported(format!("branch target `{tok}`")))
    };

    let mut ops = Vec::new();
    let mut labels = HashMap::new();
    for line in &method.lines {
        match line.kind {
            LineKind::Label => {
                if let Some(name) = line.label_name() {
                    labels.insert(name.to_string(), ops.len());
                }
                continue;
            }
            LineKind::Instruction => {}
            _ => continue,
        }
        let opcode = line.opcode().unwrap_or_default();
        let o: Vec<&str> = line.operands.iter().map(String::as_str).collect();
        let need = |n: usize| -> Result<(), EvalError> {
            if o.len() == n {
                Ok(())
            } else {
                Err(unsupported(format!(
                    "`{}`: expected {n} operands",
                    line.raw.trim()
                )))
            }
        };
        let (base, suffix) = opcode.split_once('/').unwrap_or((opcode, ""));
        let op = match (base, suffix) {
            ("nop", "") => Op::Nop,
            ("const", "4" | "16" | "") => {
                need(2)?;
                Op::Const {
                    dst: reg(o[0])?,
                    value: lit(o[1])? as i32,
                }
            }
            ("const", "high16") => {
                need(2)?;
                let v = lit(o[1])?;
                // smali accepts either the shifted or unshifted form
                let value = if v.unsigned_abs() > 0xffff {
                    v as i32
                } else {
                    (v << 16) as i32
                };
                Op::Const {
                    dst: reg(o[0])?,
                    value,
                }
            }
            ("move", "" | "from16" | "16") => {
                need(2)?;
                Op::Move {
                    dst: reg(o[0])?,
                    src: reg(o[1])?,
                }
            }
            ("neg-int", "") | ("not-int", "") => {
                need(2)?;
                let (dst, src) = (reg(o[0])?, reg(o[1])?);
                if base == "neg-int" {
                    Op::Neg { dst, src }
                } else {
                    Op::Not { dst, src }
                }
            }
            ("return", "") => {
                need(1)?;
                Op::Return { src: reg(o[0])? }
            }
            ("goto", "" | "16" | "32") => {
                need(1)?;
                Op::Goto {
                    target: label(o[0])?,
                }
            }
            ("rsub-int", "" | "lit8") => {
                need(3)?;
                Op::BinLit {
                    op: BinOp::Rsub,
                    dst: reg(o[0])?,
                    a: reg(o[1])?,
                    lit: lit(o[2])? as i32,
                }
            }
            _ if base.starts_with("if-") => {
                let cond_name = &base[3..];
                if let Some(c) = cond_name.strip_suffix('z').and_then(Cond::parse) {
                    need(2)?;
                    Op::IfZ {
                        cond: c,
                        a: reg(o[0])?,
                        target: label(o[1])?,
                    }
                } else if let Some(c) = Cond::parse(cond_name) {
                    need(3)?;
                    Op::If {
                        cond: c,
                        a: reg(o[0])?,
                        b: reg(o[1])?,
                        target: label(o[2])?,
                    }
                } else {
                    return Err(unsupported(opcode));
                }
            }
            _ => {
                let bin = base
                    .strip_suffix("-int")
                    .and_then(BinOp::parse)
                    .filter(|op| *op != BinOp::Rsub)
                    .ok_or_else(|| unsupported(opcode))?;
                match suffix {
                    "" => {
                        need(3)?;
                        Op::Bin {
                            op: bin,
                            dst: reg(o[0])?,
                            a: reg(o[1])?,
                            b: reg(o[2])?,
                        }
                    }
                    "2addr" => {
                        need(2)?;
                        let dst = reg(o[0])?;
                        Op::Bin {
                            op: bin,
                            dst,
                            a: dst,
                            b: reg(o[1])?,
                        }
                    }
                    "lit8" | "lit16" => {
                        need(3)?;
                        Op::BinLit {
                            op: bin,
                            dst: reg(o[0])?,
                            a: reg(o[1])?,
                            lit: lit(o[2])? as i32,
                        }
                    }
                    _ => return Err(unsupported(opcode)),
                }
            }
        };
        ops.push(op);
    }
    for op in &ops {
        if let Op::If { target, .. } | Op::IfZ { target, .. } | Op::Goto { target } = op {
            if !labels.contains_key(target) {
                return Err(unsupported(format!("undefined label :{target}")));
            }
        }
    }
    Ok(Program {
        ops,
        labels,
        registers,
        first_arg,
        arity: params.len(),
    })
}

/// Register file and program counter of a running method.
#[derive(Debug, Clone)]
pub struct ExecState {
    pub registers: Vec<Option<i32>>,
    pub pc: usize,
    pub steps: u64,
    pub step_budget: u64,
}

impl ExecState {
    fn read(&self, r: u32) -> Result<i32, EvalError> {
        self.registers[r as usize].ok_or(EvalError::Uninitialized(r))
    }

    fn write(&mut self, r: u32, v: i32) {
        self.registers[r as usize] = Some(v);
    }
}

impl Program {
    fn run(&self, args: &[i32], step_budget: u64) -> Result<i32, EvalError> {
        if args.len() != self.arity {
            return Err(EvalError::Arity {
                expected: self.arity,
                got: args.len(),
            });
        }
        let mut st = ExecState {
            registers: vec![None; self.registers as usize],
            pc: 0,
            steps: 0,
            step_budget,
        };
        for (i, &a) in args.iter().enumerate() {
            st.write(self.first_arg + i as u32, a);
        }
        loop {
            if st.steps >= st.step_budget {
                return Err(EvalError::NonTermination(st.step_budget));
            }
            st.steps += 1;
            let op = self.ops.get(st.pc).ok_or(EvalError::FellThrough)?;
            st.pc += 1;
            match op {
                Op::Nop => {}
                Op::Const { dst, value } => st.write(*dst, *value),
                Op::Move { dst, src } => {
                    let v = st.read(*src)?;
                    st.write(*dst, v);
                }
                Op::Bin { op, dst, a, b } => {
                    let v = op.apply(st.read(*a)?, st.read(*b)?)?;
                    st.write(*dst, v);
                }
                Op::BinLit { op, dst, a, lit } => {
                    let v = op.apply(st.read(*a)?, *lit)?;
                    st.write(*dst, v);
                }
                Op::Neg { dst, src } => {
                    let v = st.read(*src)?.wrapping_neg();
                    st.write(*dst, v);
                }
                Op::Not { dst, src } => {
                    let v = !st.read(*src)?;
                    st.write(*dst, v);
                }
                Op::If { cond, a, b, target } => {
                    if cond.holds(st.read(*a)?, st.read(*b)?) {
                        st.pc = self.labels[target];
                    }
                }
                Op::IfZ { cond, a, target } => {
                    if cond.holds(st.read(*a)?, 0) {
                        st.pc = self.labels[target];
                    }
                }
                Op::Goto { target } => st.pc = self.labels[target],
                Op::Return { src } => return st.read(*src),
            }
        }
    }
}

/// Runs a method on `args`, returning the value of its `return`.
pub fn eval_method(method: &SmaliMethod, args: &[i32], step_budget: u64) -> Result<i32, EvalError> {
    decode(method)?.run(args, step_budget)
}

/// Whether the interpreter can execute the method at all.
pub fn is_supported(method: &SmaliMethod) -> bool {
    decode(method).is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Equal {
        cases: usize,
    },
    NotEqual {
        args: Vec<i32>,
        original: Result<i32, EvalError>,
        modified: Result<i32, EvalError>,
    },
    Abstain {
        reason: String,
    },
}

impl Verdict {
    pub fn is_equal(&self) -> bool {
        matches!(self, Verdict::Equal { .. })
    }
}

pub const EDGE_VALUES: [i32; 5] = [0, 1, -1, i32::MIN, i32::MAX];

/// Compares two methods on every combination of [`EDGE_VALUES`] (or each edge
/// value broadcast to all arguments when there are more than three) plus
/// `trials` seeded random argument tuples.
pub fn check_equivalence(
    original: &SmaliMethod,
    modified: &SmaliMethod,
    trials: usize,
    seed: u64,
) -> Verdict {
    let a = match decode(original) {
        Ok(p) => p,
        Err(e) => {
            return Verdict::Abstain {
                reason: format!("original: {e}"),
            }
        }
    };
    let b = match decode(modified) {
        Ok(p) => p,
        Err(e) => {
            return Verdict::Abstain {
                reason: format!("modified: {e}"),
            }
        }
    };
    if a.arity != b.arity {
        return Verdict::Abstain {
            reason: format!("arity differs: {} vs {}", a.arity, b.arity),
        };
    }
    let n = a.arity;
    let mut cases: Vec<Vec<i32>> = Vec::new();
    if n <= 3 {
        let total = EDGE_VALUES.len().pow(n as u32);
        for mut k in 0..total {
            let mut tuple = Vec::with_capacity(n);
            for _ in 0..n {
                tuple.push(EDGE_VALUES[k % EDGE_VALUES.len()]);
                k /= EDGE_VALUES.len();
            }
            cases.push(tuple);
        }
    } else {
        cases.extend(EDGE_VALUES.iter().map(|&v| vec![v; n]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        cases.push((0..n).map(|_| rng.gen()).collect());
    }
    for args in &cases {
        let ra = a.run(args, DEFAULT_STEP_BUDGET);
        let rb = b.run(args, DEFAULT_STEP_BUDGET);
        if ra != rb {
            return Verdict::NotEqual {
                args: args.clone(),
                original: ra,
                modified: rb,
            };
        }
    }
    Verdict::Equal { cases: cases.len() }
}
