//! Instruction set of the toy register machine.
//!
//! Programs are a list of functions, each a list of labeled basic blocks.
//! Control-flow targets are stored as block indices inside the owning
//! function, so a [`Loc`] (function, block, instruction index) is enough to
//! address any instruction. Human-facing identities use [`InstructionId`],
//! which carries the names instead.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Number of general purpose registers.
pub const NUM_REGS: usize = 16;

/// A register index, always `< 16`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub const fn new(index: u8) -> Option<Reg> {
        if (index as usize) < NUM_REGS {
            Some(Reg(index))
        } else {
            None
        }
    }

    /// Panics if `index >= 16`. Meant for constant tables and tests.
    pub const fn r(index: u8) -> Reg {
        match Reg::new(index) {
            Some(r) => r,
            None => panic!("register index out of range"),
        }
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Second source operand of ALU, compare and alloc instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
}

/// Unsigned comparison predicates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cond {
    pub const ALL: [Cond; 6] = [Cond::Eq, Cond::Ne, Cond::Lt, Cond::Le, Cond::Gt, Cond::Ge];

    pub fn eval(self, lhs: u64, rhs: u64) -> bool {
        match self {
            Cond::Eq => lhs == rhs,
            Cond::Ne => lhs != rhs,
            Cond::Lt => lhs < rhs,
            Cond::Le => lhs <= rhs,
            Cond::Gt => lhs > rhs,
            Cond::Ge => lhs >= rhs,
        }
    }

    pub fn negate(self) -> Cond {
        match self {
            Cond::Eq => Cond::Ne,
            Cond::Ne => Cond::Eq,
            Cond::Lt => Cond::Ge,
            Cond::Le => Cond::Gt,
            Cond::Gt => Cond::Le,
            Cond::Ge => Cond::Lt,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Lt => "lt",
            Cond::Le => "le",
            Cond::Gt => "gt",
            Cond::Ge => "ge",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Cond> {
        Cond::ALL.iter().copied().find(|c| c.mnemonic() == s)
    }
}

/// Binary arithmetic/logic operations. All wrap on overflow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Div,
}

impl AluOp {
    pub const ALL: [AluOp; 9] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::Mul,
        AluOp::And,
        AluOp::Or,
        AluOp::Xor,
        AluOp::Shl,
        AluOp::Shr,
        AluOp::Div,
    ];

    pub fn opcode(self) -> Opcode {
        match self {
            AluOp::Add => Opcode::Add,
            AluOp::Sub => Opcode::Sub,
            AluOp::Mul => Opcode::Mul,
            AluOp::And => Opcode::And,
            AluOp::Or => Opcode::Or,
            AluOp::Xor => Opcode::Xor,
            AluOp::Shl => Opcode::Shl,
            AluOp::Shr => Opcode::Shr,
            AluOp::Div => Opcode::Div,
        }
    }

    /// `None` means division by zero.
    pub fn apply(self, a: u64, b: u64) -> Option<u64> {
        Some(match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Shl => a.wrapping_shl(b as u32 & 63),
            AluOp::Shr => a.wrapping_shr(b as u32 & 63),
            AluOp::Div => a.checked_div(b)?,
        })
    }
}

/// Opcode mnemonics, one per instruction form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Opcode {
    Const,
    Mov,
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Div,
    Cmp,
    SetCc,
    Br,
    Jmp,
    Jtab,
    Load,
    Store,
    Alloc,
    Call,
    Ret,
    Fence,
    Input,
    InputLen,
    Halt,
}

impl Opcode {
    pub const ALL: [Opcode; 25] = [
        Opcode::Const,
        Opcode::Mov,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::Div,
        Opcode::Cmp,
        Opcode::SetCc,
        Opcode::Br,
        Opcode::Jmp,
        Opcode::Jtab,
        Opcode::Load,
        Opcode::Store,
        Opcode::Alloc,
        Opcode::Call,
        Opcode::Ret,
        Opcode::Fence,
        Opcode::Input,
        Opcode::InputLen,
        Opcode::Halt,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Const => "const",
            Opcode::Mov => "mov",
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::And => "and",
            Opcode::Or => "or",
            Opcode::Xor => "xor",
            Opcode::Shl => "shl",
            Opcode::Shr => "shr",
            Opcode::Div => "div",
            Opcode::Cmp => "cmp",
            Opcode::SetCc => "setcc",
            Opcode::Br => "br",
            Opcode::Jmp => "jmp",
            Opcode::Jtab => "jtab",
            Opcode::Load => "load",
            Opcode::Store => "store",
            Opcode::Alloc => "alloc",
            Opcode::Call => "call",
            Opcode::Ret => "ret",
            Opcode::Fence => "fence",
            Opcode::Input => "input",
            Opcode::InputLen => "inputlen",
            Opcode::Halt => "halt",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|o| o.mnemonic() == s)
    }

    pub fn alu(self) -> Option<AluOp> {
        AluOp::ALL.iter().copied().find(|a| a.opcode() == self)
    }

    pub fn is_terminator(self) -> bool {
        matches!(
            self,
            Opcode::Br | Opcode::Jmp | Opcode::Jtab | Opcode::Ret | Opcode::Halt
        )
    }
}

/// Index of a block inside its function.
pub type BlockIdx = u32;
/// Index of a function inside its program.
pub type FuncIdx = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Inst {
    Const { dst: Reg, imm: u64 },
    Mov { dst: Reg, src: Reg },
    Alu { op: AluOp, dst: Reg, lhs: Reg, rhs: Operand },
    Cmp { lhs: Reg, rhs: Operand },
    SetCc { dst: Reg, cond: Cond },
    Br { cond: Cond, taken: BlockIdx, fallthrough: BlockIdx },
    Jmp { target: BlockIdx },
    Jtab { index: Reg, targets: Vec<BlockIdx> },
    /// `dst := mem64[base + offset]`
    Load { dst: Reg, base: Reg, offset: u64 },
    /// `mem64[base + offset] := src`
    Store { base: Reg, offset: u64, src: Reg },
    Alloc { dst: Reg, size: Operand },
    Call { func: FuncIdx },
    Ret,
    Fence,
    Input { dst: Reg, offset: u64 },
    InputLen { dst: Reg },
    Halt,
}

impl Inst {
    pub fn opcode(&self) -> Opcode {
        match self {
            Inst::Const { .. } => Opcode::Const,
            Inst::Mov { .. } => Opcode::Mov,
            Inst::Alu { op, .. } => op.opcode(),
            Inst::Cmp { .. } => Opcode::Cmp,
            Inst::SetCc { .. } => Opcode::SetCc,
            Inst::Br { .. } => Opcode::Br,
            Inst::Jmp { .. } => Opcode::Jmp,
            Inst::Jtab { .. } => Opcode::Jtab,
            Inst::Load { .. } => Opcode::Load,
            Inst::Store { .. } => Opcode::Store,
            Inst::Alloc { .. } => Opcode::Alloc,
            Inst::Call { .. } => Opcode::Call,
            Inst::Ret => Opcode::Ret,
            Inst::Fence => Opcode::Fence,
            Inst::Input { .. } => Opcode::Input,
            Inst::InputLen { .. } => Opcode::InputLen,
            Inst::Halt => Opcode::Halt,
        }
    }

    pub fn is_terminator(&self) -> bool {
        self.opcode().is_terminator()
    }

    /// Registers read or written by this instruction.
    pub fn registers(&self) -> Vec<Reg> {
        let mut regs = Vec::new();
        let operand = |o: &Operand, regs: &mut Vec<Reg>| {
            if let Operand::Reg(r) = o {
                regs.push(*r);
            }
        };
        match self {
            Inst::Const { dst, .. } | Inst::SetCc { dst, .. } | Inst::InputLen { dst } => {
                regs.push(*dst)
            }
            Inst::Input { dst, .. } => regs.push(*dst),
            Inst::Mov { dst, src } => regs.extend([*dst, *src]),
            Inst::Alu { dst, lhs, rhs, .. } => {
                regs.extend([*dst, *lhs]);
                operand(rhs, &mut regs);
            }
            Inst::Cmp { lhs, rhs } => {
                regs.push(*lhs);
                operand(rhs, &mut regs);
            }
            Inst::Jtab { index, .. } => regs.push(*index),
            Inst::Load { dst, base, .. } => regs.extend([*dst, *base]),
            Inst::Store { base, src, .. } => regs.extend([*base, *src]),
            Inst::Alloc { dst, size } => {
                regs.push(*dst);
                operand(size, &mut regs);
            }
            Inst::Br { .. }
            | Inst::Jmp { .. }
            | Inst::Call { .. }
            | Inst::Ret
            | Inst::Fence
            | Inst::Halt => {}
        }
        regs
    }

    /// Blocks this instruction may transfer control to (within its function).
    pub fn block_targets(&self) -> Vec<BlockIdx> {
        match self {
            Inst::Br { taken, fallthrough, .. } => alloc::vec![*taken, *fallthrough],
            Inst::Jmp { target } => alloc::vec![*target],
            Inst::Jtab { targets, .. } => targets.clone(),
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Block {
    pub label: String,
    pub insts: Vec<Inst>,
}

impl Block {
    pub fn terminator(&self) -> Option<&Inst> {
        self.insts.last().filter(|i| i.is_terminator())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Function {
    pub name: String,
    pub blocks: Vec<Block>,
}

impl Function {
    pub fn block_index(&self, label: &str) -> Option<BlockIdx> {
        self.blocks
            .iter()
            .position(|b| b.label == label)
            .map(|i| i as BlockIdx)
    }
}

/// A whole program: functions in definition order, the entry function's
/// name and the static data image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Program {
    pub functions: Vec<Function>,
    pub entry: String,
    pub data: Vec<u8>,
}

/// Structural instruction address: indices into the owning [`Program`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Loc {
    pub func: FuncIdx,
    pub block: BlockIdx,
    pub idx: u32,
}

impl Loc {
    pub const fn new(func: FuncIdx, block: BlockIdx, idx: u32) -> Loc {
        Loc { func, block, idx }
    }

    pub const fn block_start(func: FuncIdx, block: BlockIdx) -> Loc {
        Loc { func, block, idx: 0 }
    }
}

/// Named instruction identity, printed as `fn:block:idx`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstructionId {
    pub func: String,
    pub block: String,
    pub idx: u32,
}

impl InstructionId {
    pub fn new(func: impl Into<String>, block: impl Into<String>, idx: u32) -> Self {
        InstructionId {
            func: func.into(),
            block: block.into(),
            idx,
        }
    }
}

impl fmt::Display for InstructionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.func, self.block, self.idx)
    }
}

impl core::str::FromStr for InstructionId {
    type Err = ParseIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.rsplitn(3, ':');
        let idx = parts.next().ok_or(ParseIdError)?;
        let block = parts.next().ok_or(ParseIdError)?;
        let func = parts.next().ok_or(ParseIdError)?;
        if func.is_empty() || block.is_empty() {
            return Err(ParseIdError);
        }
        let idx = idx.parse().map_err(|_| ParseIdError)?;
        Ok(InstructionId::new(func, block, idx))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("expected an instruction id of the form fn:block:idx")]
pub struct ParseIdError;

impl Program {
    pub fn function_index(&self, name: &str) -> Option<FuncIdx> {
        self.functions
            .iter()
            .position(|f| f.name == name)
            .map(|i| i as FuncIdx)
    }

    pub fn entry_index(&self) -> Option<FuncIdx> {
        self.function_index(&self.entry)
    }

    pub fn inst(&self, loc: Loc) -> Option<&Inst> {
        self.functions
            .get(loc.func as usize)?
            .blocks
            .get(loc.block as usize)?
            .insts
            .get(loc.idx as usize)
    }

    pub fn block(&self, func: FuncIdx, block: BlockIdx) -> Option<&Block> {
        self.functions.get(func as usize)?.blocks.get(block as usize)
    }

    /// Named identity of `loc`. Panics if `loc` does not resolve.
    pub fn id_of(&self, loc: Loc) -> InstructionId {
        let f = &self.functions[loc.func as usize];
        InstructionId::new(f.name.clone(), f.blocks[loc.block as usize].label.clone(), loc.idx)
    }

    pub fn resolve(&self, id: &InstructionId) -> Option<Loc> {
        let func = self.function_index(&id.func)?;
        let block = self.functions[func as usize].block_index(&id.block)?;
        let loc = Loc::new(func, block, id.idx);
        self.inst(loc).map(|_| loc)
    }

    /// Like [`Program::resolve`], but for a conditional branch it tolerates a
    /// stale index: the branch is the block terminator, so `(fn, block)`
    /// identifies it even after a pass inserted instructions into the block.
    pub fn resolve_branch(&self, id: &InstructionId) -> Option<Loc> {
        let func = self.function_index(&id.func)?;
        let block = self.functions[func as usize].block_index(&id.block)?;
        let insts = &self.functions[func as usize].blocks[block as usize].insts;
        match insts.last() {
            Some(Inst::Br { .. }) => Some(Loc::new(func, block, insts.len() as u32 - 1)),
            _ => None,
        }
    }

    /// Every instruction with its location, in layout order.
    pub fn iter_insts(&self) -> impl Iterator<Item = (Loc, &Inst)> + '_ {
        self.functions.iter().enumerate().flat_map(|(fi, f)| {
            f.blocks.iter().enumerate().flat_map(move |(bi, b)| {
                b.insts
                    .iter()
                    .enumerate()
                    .map(move |(ii, inst)| (Loc::new(fi as u32, bi as u32, ii as u32), inst))
            })
        })
    }

    /// Locations of all conditional branches.
    pub fn branches(&self) -> Vec<Loc> {
        self.iter_insts()
            .filter(|(_, i)| matches!(i, Inst::Br { .. }))
            .map(|(l, _)| l)
            .collect()
    }

    pub fn instruction_count(&self) -> usize {
        self.functions
            .iter()
            .flat_map(|f| f.blocks.iter())
            .map(|b| b.insts.len())
            .sum()
    }
}

/// One problem found by [`validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationIssue {
    pub at: Option<InstructionId>,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.at {
            Some(at) => write!(f, "{at}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Checks every structural invariant of `p`. Pure; never panics.
pub fn validate(p: &Program) -> ValidationReport {
    use alloc::format;
    let mut issues = Vec::new();
    let mut push = |at: Option<InstructionId>, message: String| {
        issues.push(ValidationIssue { at, message })
    };

    if p.entry_index().is_none() {
        push(None, format!("entry function '{}' does not exist", p.entry));
    }
    for (fi, f) in p.functions.iter().enumerate() {
        if p.functions[..fi].iter().any(|g| g.name == f.name) {
            push(None, format!("duplicate function '{}'", f.name));
        }
        if f.blocks.is_empty() {
            push(None, format!("function '{}' has no blocks", f.name));
        }
        for (bi, b) in f.blocks.iter().enumerate() {
            if f.blocks[..bi].iter().any(|c| c.label == b.label) {
                push(None, format!("duplicate label '{}' in function '{}'", b.label, f.name));
            }
            let id = |ii: usize| Some(InstructionId::new(f.name.clone(), b.label.clone(), ii as u32));
            if b.insts.is_empty() {
                push(None, format!("block '{}:{}' is empty", f.name, b.label));
                continue;
            }
            let last = b.insts.len() - 1;
            for (ii, inst) in b.insts.iter().enumerate() {
                if inst.is_terminator() && ii != last {
                    push(id(ii), "control transfer not at block end".into());
                }
                if ii == last && !inst.is_terminator() {
                    push(id(ii), "block does not end with a terminator".into());
                }
                for r in inst.registers() {
                    if r.index() >= NUM_REGS {
                        push(id(ii), format!("register {r} out of range"));
                    }
                }
                for t in inst.block_targets() {
                    if t as usize >= f.blocks.len() {
                        push(id(ii), format!("branch target #{t} does not exist"));
                    }
                }
                match inst {
                    Inst::Jtab { targets, .. } if targets.is_empty() => {
                        push(id(ii), "jump table is empty".into())
                    }
                    Inst::Call { func } if *func as usize >= p.functions.len() => {
                        push(id(ii), format!("call target #{func} does not exist"))
                    }
                    _ => {}
                }
            }
        }
    }
    ValidationReport { issues }
}
