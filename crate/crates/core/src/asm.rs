//! Line-oriented assembly text: two-pass parser and canonical emitter.
//!
//! ```text
//! data "\x01\x02"        ; static bytes, placed at the data base
//! entry main             ; optional, defaults to `main`
//! fn main:
//! entry:
//!   input r0, 0
//!   cmp r0, 16
//!   br lt, body, done
//! body:
//!   ...
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use crate::isa::{
    validate, Block, BlockIdx, Cond, Function, Inst, Opcode, Operand, Program, Reg,
};

/// A parse problem tied to a 1-based source line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{} assembly error(s); first: {}", .0.len(), .0.first().map(|d| d.to_string()).unwrap_or_default())]
pub struct ParseError(pub Vec<Diagnostic>);

struct RawInst<'a> {
    line: usize,
    mnemonic: &'a str,
    operands: Vec<&'a str>,
}

struct RawBlock<'a> {
    label: &'a str,
    insts: Vec<RawInst<'a>>,
}

struct RawFunction<'a> {
    name: &'a str,
    line: usize,
    blocks: Vec<RawBlock<'a>>,
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' if in_str => escaped = true,
            '"' => in_str = !in_str,
            ';' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Splits on commas that are not inside `[...]`.
fn split_operands(s: &str) -> Vec<&str> {
    let s = s.trim();
    if s.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(s[start..].trim());
    out
}

pub fn parse_imm(s: &str) -> Option<u64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let cleaned: String = body.chars().filter(|c| *c != '_').collect();
    if cleaned.is_empty() {
        return None;
    }
    let v = if let Some(hex) = cleaned
        .strip_prefix("0x")
        .or_else(|| cleaned.strip_prefix("0X"))
    {
        u64::from_str_radix(hex, 16).ok()?
    } else {
        cleaned.parse::<u64>().ok()?
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn parse_reg(s: &str) -> Result<Reg, String> {
    let idx = s
        .strip_prefix('r')
        .and_then(|n| n.parse::<u32>().ok())
        .ok_or_else(|| format!("expected register, found '{s}'"))?;
    u8::try_from(idx)
        .ok()
        .and_then(Reg::new)
        .ok_or_else(|| format!("register {s} out of range"))
}

fn parse_operand(s: &str) -> Result<Operand, String> {
    if s.starts_with('r') {
        parse_reg(s).map(Operand::Reg)
    } else {
        parse_imm(s)
            .map(Operand::Imm)
            .ok_or_else(|| format!("expected register or immediate, found '{s}'"))
    }
}

fn parse_imm_operand(s: &str) -> Result<u64, String> {
    parse_imm(s).ok_or_else(|| format!("expected immediate, found '{s}'"))
}

fn parse_string_literal(s: &str) -> Result<Vec<u8>, String> {
    let inner = s
        .strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .ok_or_else(|| "expected a quoted string".to_string())?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next() {
            Some('n') => out.push(b'\n'),
            Some('t') => out.push(b'\t'),
            Some('r') => out.push(b'\r'),
            Some('0') => out.push(0),
            Some('\\') => out.push(b'\\'),
            Some('"') => out.push(b'"'),
            Some('x') => {
                let hi = chars.next();
                let lo = chars.next();
                let byte = match (hi, lo) {
                    (Some(h), Some(l)) => {
                        let mut digits = String::new();
                        digits.push(h);
                        digits.push(l);
                        u8::from_str_radix(&digits, 16).ok()
                    }
                    _ => None,
                };
                out.push(byte.ok_or_else(|| "bad \\x escape".to_string())?);
            }
            other => return Err(format!("unknown escape '\\{}'", other.unwrap_or(' '))),
        }
    }
    Ok(out)
}

/// Parses and validates assembly text.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut diags = Vec::new();
    let mut data = Vec::new();
    let mut entry: Option<String> = None;
    let mut funcs: Vec<RawFunction<'_>> = Vec::new();

    // Pass 1: structure.
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let l = strip_comment(raw).trim();
        if l.is_empty() {
            continue;
        }
        if let Some(rest) = l.strip_prefix("data ") {
            match parse_string_literal(rest.trim()) {
                Ok(bytes) => data.extend(bytes),
                Err(e) => diags.push(Diagnostic { line, message: e }),
            }
            continue;
        }
        if let Some(rest) = l.strip_prefix("entry ") {
            let name = rest.trim();
            if !is_ident(name) {
                diags.push(Diagnostic { line, message: format!("bad entry name '{name}'") });
            } else if entry.is_some() {
                diags.push(Diagnostic { line, message: "duplicate entry directive".into() });
            } else {
                entry = Some(name.into());
            }
            continue;
        }
        if let Some(rest) = l.strip_prefix("fn ") {
            let name = rest.trim().strip_suffix(':').unwrap_or("").trim();
            if !is_ident(name) {
                diags.push(Diagnostic { line, message: format!("bad function header '{l}'") });
                continue;
            }
            if funcs.iter().any(|f| f.name == name) {
                diags.push(Diagnostic { line, message: format!("duplicate function '{name}'") });
            }
            funcs.push(RawFunction { name, line, blocks: Vec::new() });
            continue;
        }
        if let Some(label) = l.strip_suffix(':') {
            let label = label.trim();
            if !is_ident(label) {
                diags.push(Diagnostic { line, message: format!("bad label '{label}'") });
                continue;
            }
            let Some(f) = funcs.last_mut() else {
                diags.push(Diagnostic { line, message: format!("label '{label}' outside a function") });
                continue;
            };
            if f.blocks.iter().any(|b| b.label == label) {
                diags.push(Diagnostic { line, message: format!("duplicate label '{label}'") });
            }
            f.blocks.push(RawBlock { label, insts: Vec::new() });
            continue;
        }
        let (mnemonic, rest) = match l.find(char::is_whitespace) {
            Some(i) => (&l[..i], &l[i..]),
            None => (l, ""),
        };
        let Some(block) = funcs.last_mut().and_then(|f| f.blocks.last_mut()) else {
            diags.push(Diagnostic { line, message: "instruction outside a block".into() });
            continue;
        };
        block.insts.push(RawInst { line, mnemonic, operands: split_operands(rest) });
    }

    // Pass 2: instructions with label resolution.
    let mut functions = Vec::with_capacity(funcs.len());
    for f in &funcs {
        let mut blocks = Vec::with_capacity(f.blocks.len());
        if f.blocks.is_empty() {
            diags.push(Diagnostic { line: f.line, message: format!("function '{}' has no blocks", f.name) });
        }
        for b in &f.blocks {
            let mut insts = Vec::with_capacity(b.insts.len());
            for (i, ri) in b.insts.iter().enumerate() {
                match parse_inst(ri, f, &funcs) {
                    Ok(inst) => {
                        let last = i + 1 == b.insts.len();
                        if inst.is_terminator() && !last {
                            diags.push(Diagnostic {
                                line: ri.line,
                                message: "control transfer not at block end".into(),
                            });
                        }
                        if !inst.is_terminator() && last {
                            diags.push(Diagnostic {
                                line: ri.line,
                                message: format!("missing terminator at end of block '{}'", b.label),
                            });
                        }
                        insts.push(inst);
                    }
                    Err(message) => diags.push(Diagnostic { line: ri.line, message }),
                }
            }
            if b.insts.is_empty() {
                diags.push(Diagnostic {
                    line: f.line,
                    message: format!("missing terminator: block '{}' is empty", b.label),
                });
            }
            blocks.push(Block { label: b.label.into(), insts });
        }
        functions.push(Function { name: f.name.into(), blocks });
    }

    let entry = entry.unwrap_or_else(|| {
        if funcs.iter().any(|f| f.name == "main") || funcs.is_empty() {
            "main".into()
        } else {
            funcs[0].name.into()
        }
    });
    if !funcs.iter().any(|f| f.name == entry) {
        diags.push(Diagnostic { line: 1, message: format!("entry function '{entry}' does not exist") });
    }

    if !diags.is_empty() {
        diags.sort_by_key(|d| d.line);
        return Err(ParseError(diags));
    }
    let program = Program { functions, entry, data };
    let report = validate(&program);
    if !report.is_empty() {
        return Err(ParseError(
            report
                .issues
                .into_iter()
                .map(|i| Diagnostic { line: 0, message: i.to_string() })
                .collect(),
        ));
    }
    Ok(program)
}

fn parse_inst(ri: &RawInst<'_>, f: &RawFunction<'_>, funcs: &[RawFunction<'_>]) -> Result<Inst, String> {
    let op = Opcode::from_mnemonic(ri.mnemonic)
        .ok_or_else(|| format!("unknown opcode '{}'", ri.mnemonic))?;
    let ops = &ri.operands;
    let arity = |n: usize| -> Result<(), String> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(format!("'{}' takes {n} operand(s), found {}", ri.mnemonic, ops.len()))
        }
    };
    let label = |name: &str| -> Result<BlockIdx, String> {
        f.blocks
            .iter()
            .position(|b| b.label == name)
            .map(|i| i as BlockIdx)
            .ok_or_else(|| format!("unresolved label '{name}'"))
    };
    let cond = |s: &str| Cond::from_mnemonic(s).ok_or_else(|| format!("unknown condition '{s}'"));

    if let Some(alu) = op.alu() {
        arity(3)?;
        return Ok(Inst::Alu {
            op: alu,
            dst: parse_reg(ops[0])?,
            lhs: parse_reg(ops[1])?,
            rhs: parse_operand(ops[2])?,
        });
    }
    Ok(match op {
        Opcode::Const => {
            arity(2)?;
            Inst::Const { dst: parse_reg(ops[0])?, imm: parse_imm_operand(ops[1])? }
        }
        Opcode::Mov => {
            arity(2)?;
            Inst::Mov { dst: parse_reg(ops[0])?, src: parse_reg(ops[1])? }
        }
        Opcode::Cmp => {
            arity(2)?;
            Inst::Cmp { lhs: parse_reg(ops[0])?, rhs: parse_operand(ops[1])? }
        }
        Opcode::SetCc => {
            arity(2)?;
            Inst::SetCc { dst: parse_reg(ops[0])?, cond: cond(ops[1])? }
        }
        Opcode::Br => {
            arity(3)?;
            Inst::Br { cond: cond(ops[0])?, taken: label(ops[1])?, fallthrough: label(ops[2])? }
        }
        Opcode::Jmp => {
            arity(1)?;
            Inst::Jmp { target: label(ops[0])? }
        }
        Opcode::Jtab => {
            arity(2)?;
            let list = ops[1]
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| "jump table must be a [label, ...] list".to_string())?;
            let targets = split_operands(list)
                .into_iter()
                .filter(|s| !s.is_empty())
                .map(label)
                .collect::<Result<Vec<_>, _>>()?;
            if targets.is_empty() {
                return Err("jump table is empty".into());
            }
            Inst::Jtab { index: parse_reg(ops[0])?, targets }
        }
        Opcode::Load => {
            arity(3)?;
            Inst::Load { dst: parse_reg(ops[0])?, base: parse_reg(ops[1])?, offset: parse_imm_operand(ops[2])? }
        }
        Opcode::Store => {
            arity(3)?;
            Inst::Store { base: parse_reg(ops[0])?, offset: parse_imm_operand(ops[1])?, src: parse_reg(ops[2])? }
        }
        Opcode::Alloc => {
            arity(2)?;
            Inst::Alloc { dst: parse_reg(ops[0])?, size: parse_operand(ops[1])? }
        }
        Opcode::Call => {
            arity(1)?;
            let func = funcs
                .iter()
                .position(|g| g.name == ops[0])
                .ok_or_else(|| format!("call to unknown function '{}'", ops[0]))?;
            Inst::Call { func: func as u32 }
        }
        Opcode::Input => {
            arity(2)?;
            Inst::Input { dst: parse_reg(ops[0])?, offset: parse_imm_operand(ops[1])? }
        }
        Opcode::InputLen => {
            arity(1)?;
            Inst::InputLen { dst: parse_reg(ops[0])? }
        }
        Opcode::Ret => {
            arity(0)?;
            Inst::Ret
        }
        Opcode::Fence => {
            arity(0)?;
            Inst::Fence
        }
        Opcode::Halt => {
            arity(0)?;
            Inst::Halt
        }
        _ => unreachable!("alu opcodes handled above"),
    })
}

/// Canonical immediate spelling: small negatives as `-n`, large values in hex.
pub fn fmt_imm(v: u64) -> String {
    if v > u64::MAX - 0xffff {
        format!("-{}", v.wrapping_neg())
    } else if v >= 0x1_0000 {
        format!("{v:#x}")
    } else {
        format!("{v}")
    }
}

fn fmt_operand(o: &Operand) -> String {
    match o {
        Operand::Reg(r) => r.to_string(),
        Operand::Imm(v) => fmt_imm(*v),
    }
}

/// Renders one instruction as it appears in a block of `func` in `p`.
pub fn fmt_inst(p: &Program, func: &Function, inst: &Inst) -> String {
    let label = |b: &BlockIdx| {
        func.blocks
            .get(*b as usize)
            .map(|b| b.label.clone())
            .unwrap_or_else(|| format!("#{b}"))
    };
    let m = inst.opcode().mnemonic();
    match inst {
        Inst::Const { dst, imm } => format!("{m} {dst}, {}", fmt_imm(*imm)),
        Inst::Mov { dst, src } => format!("{m} {dst}, {src}"),
        Inst::Alu { dst, lhs, rhs, .. } => format!("{m} {dst}, {lhs}, {}", fmt_operand(rhs)),
        Inst::Cmp { lhs, rhs } => format!("{m} {lhs}, {}", fmt_operand(rhs)),
        Inst::SetCc { dst, cond } => format!("{m} {dst}, {}", cond.mnemonic()),
        Inst::Br { cond, taken, fallthrough } => {
            format!("{m} {}, {}, {}", cond.mnemonic(), label(taken), label(fallthrough))
        }
        Inst::Jmp { target } => format!("{m} {}", label(target)),
        Inst::Jtab { index, targets } => {
            let list: Vec<String> = targets.iter().map(label).collect();
            format!("{m} {index}, [{}]", list.join(", "))
        }
        Inst::Load { dst, base, offset } => format!("{m} {dst}, {base}, {}", fmt_imm(*offset)),
        Inst::Store { base, offset, src } => format!("{m} {base}, {}, {src}", fmt_imm(*offset)),
        Inst::Alloc { dst, size } => format!("{m} {dst}, {}", fmt_operand(size)),
        Inst::Call { func } => format!(
            "{m} {}",
            p.functions
                .get(*func as usize)
                .map(|f| f.name.clone())
                .unwrap_or_else(|| format!("#{func}"))
        ),
        Inst::Input { dst, offset } => format!("{m} {dst}, {}", fmt_imm(*offset)),
        Inst::InputLen { dst } => format!("{m} {dst}"),
        Inst::Ret | Inst::Fence | Inst::Halt => m.into(),
    }
}

fn escape_data(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() + 2);
    s.push('"');
    for &b in bytes {
        match b {
            b'"' => s.push_str("\\\""),
            b'\\' => s.push_str("\\\\"),
            0x20..=0x7e => s.push(b as char),
            _ => {
                let _ = write!(s, "\\x{b:02x}");
            }
        }
    }
    s.push('"');
    s
}

/// Canonical text form; `parse_program(&emit_text(p)) == Ok(p)` for valid `p`.
pub fn emit_text(p: &Program) -> String {
    let mut out = String::new();
    if !p.data.is_empty() {
        let _ = writeln!(out, "data {}", escape_data(&p.data));
    }
    if p.entry != "main" {
        let _ = writeln!(out, "entry {}", p.entry);
    }
    for (i, f) in p.functions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "fn {}:", f.name);
        for b in &f.blocks {
            let _ = writeln!(out, "{}:", b.label);
            for inst in &b.insts {
                let _ = writeln!(out, "  {}", fmt_inst(p, f, inst));
            }
        }
    }
    out
}
