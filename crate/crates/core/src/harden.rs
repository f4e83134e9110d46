//! Whitelist-aware hardening passes and the re-simulation verifier.
//!
//! Both passes split every edge of an instrumented BR into a fresh
//! trampoline block appended to the function, so existing block labels stay
//! put and only the BR targets change.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::analyze::Whitelist;
use crate::detect::ViolationRecord;
use crate::isa::{AluOp, BlockIdx, Block, Cond, FuncIdx, Inst, InstructionId, Loc, Operand, Program, Reg};
use crate::spec::{run_with_exposure, BranchStats, EngineError, SpecConfig};
use crate::vm::{Image, VmConfig};

pub const FENCE_PREFIX: &str = "__fence";
pub const SLH_PREFIX: &str = "__slh";
pub const MASK_REG: Reg = Reg::r(15);
/// Scratch register used by the SLH rewrites.
pub const SLH_SCRATCH: Reg = Reg::r(14);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HardenMode {
    #[default]
    Fence,
    Slh,
}

impl HardenMode {
    pub fn name(self) -> &'static str {
        match self {
            HardenMode::Fence => "fence",
            HardenMode::Slh => "slh",
        }
    }

    pub fn from_name(s: &str) -> Option<HardenMode> {
        match s {
            "fence" => Some(HardenMode::Fence),
            "slh" => Some(HardenMode::Slh),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum HardenError {
    #[error("MASK-REGISTER-IN-USE: {reg} used at {at}")]
    MaskRegisterInUse { reg: Reg, at: InstructionId },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HardenSummary {
    pub total: usize,
    pub instrumented: usize,
    pub whitelisted: usize,
    /// Whitelist entries that name no BR of the program.
    pub unresolved: Vec<InstructionId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hardened {
    pub program: Program,
    pub summary: HardenSummary,
}

fn split_whitelist(p: &Program, w: &Whitelist) -> (BTreeSet<Loc>, HardenSummary) {
    let mut listed = BTreeSet::new();
    let mut unresolved = Vec::new();
    for id in &w.branches {
        match p.resolve_branch(id) {
            Some(l) => {
                listed.insert(l);
            }
            None => unresolved.push(id.clone()),
        }
    }
    let total = p.branches().len();
    let summary = HardenSummary { total, instrumented: total - listed.len(), whitelisted: listed.len(), unresolved };
    (listed, summary)
}

fn fresh_label(f: &[Block], prefix: &str, next: &mut usize) -> String {
    loop {
        let label = format!("{prefix}{next}");
        *next += 1;
        if !f.iter().any(|b| b.label == label) {
            return label;
        }
    }
}

/// Retargets both edges of every listed BR through trampolines built by
/// `edge(cond, taken_edge, target)`.
fn split_edges(
    p: &Program,
    skip: &BTreeSet<Loc>,
    prefix: &str,
    mut edge: impl FnMut(Cond, bool, BlockIdx) -> Vec<Inst>,
) -> Program {
    let mut out = p.clone();
    for (fi, f) in out.functions.iter_mut().enumerate() {
        let mut next = 0;
        for bi in 0..f.blocks.len() {
            let Some(idx) = f.blocks[bi].insts.len().checked_sub(1) else { continue };
            let Inst::Br { cond, taken, fallthrough } = f.blocks[bi].insts[idx] else { continue };
            if skip.contains(&Loc::new(fi as FuncIdx, bi as BlockIdx, idx as u32)) {
                continue;
            }
            let mut target = |to: BlockIdx, is_taken: bool, f: &mut Vec<Block>| {
                let label = fresh_label(f, prefix, &mut next);
                f.push(Block { label, insts: edge(cond, is_taken, to) });
                (f.len() - 1) as BlockIdx
            };
            let t = target(taken, true, &mut f.blocks);
            let e = target(fallthrough, false, &mut f.blocks);
            f.blocks[bi].insts[idx] = Inst::Br { cond, taken: t, fallthrough: e };
        }
    }
    out
}

pub fn fence_pass(p: &Program, w: &Whitelist) -> Hardened {
    let (skip, summary) = split_whitelist(p, w);
    let program = split_edges(p, &skip, FENCE_PREFIX, |_, _, to| alloc::vec![Inst::Fence, Inst::Jmp { target: to }]);
    Hardened { program, summary }
}

fn check_free(p: &Program) -> Result<(), HardenError> {
    for (loc, inst) in p.iter_insts() {
        if let Some(reg) = inst.registers().into_iter().find(|r| *r == MASK_REG || *r == SLH_SCRATCH) {
            return Err(HardenError::MaskRegisterInUse { reg, at: p.id_of(loc) });
        }
    }
    Ok(())
}

fn mask_accesses(insts: &[Inst]) -> Vec<Inst> {
    let s = SLH_SCRATCH;
    let masked = |base: Reg, offset: u64| {
        [
            Inst::Alu { op: AluOp::Add, dst: s, lhs: base, rhs: Operand::Imm(offset) },
            Inst::Alu { op: AluOp::And, dst: s, lhs: s, rhs: Operand::Reg(MASK_REG) },
        ]
    };
    let mut out = Vec::with_capacity(insts.len());
    for inst in insts {
        match inst {
            Inst::Load { dst, base, offset } => {
                out.extend(masked(*base, *offset));
                out.push(Inst::Load { dst: *dst, base: s, offset: 0 });
            }
            Inst::Store { base, offset, src } => {
                out.extend(masked(*base, *offset));
                out.push(Inst::Store { base: s, offset: 0, src: *src });
            }
            Inst::Jtab { index, targets } => {
                out.push(Inst::Alu { op: AluOp::And, dst: s, lhs: *index, rhs: Operand::Reg(MASK_REG) });
                out.push(Inst::Jtab { index: s, targets: targets.clone() });
            }
            other => out.push(other.clone()),
        }
    }
    out
}

/// Speculative load hardening by address masking.
///
/// The mask is set to all-ones once, on entry to the entry function, and is
/// only ever narrowed afterwards, so a mispredicted path stays poisoned
/// across calls.
pub fn slh_pass(p: &Program, w: &Whitelist) -> Result<Hardened, HardenError> {
    check_free(p)?;
    let (skip, summary) = split_whitelist(p, w);
    let s = SLH_SCRATCH;
    let mut program = split_edges(p, &skip, SLH_PREFIX, |cond, taken, to| {
        let agree = if taken { cond } else { cond.negate() };
        alloc::vec![
            Inst::SetCc { dst: s, cond: agree },
            Inst::Alu { op: AluOp::Mul, dst: s, lhs: s, rhs: Operand::Imm(u64::MAX) },
            Inst::Alu { op: AluOp::And, dst: MASK_REG, lhs: MASK_REG, rhs: Operand::Reg(s) },
            Inst::Jmp { target: to },
        ]
    });
    for f in &mut program.functions {
        for b in &mut f.blocks {
            if !b.label.starts_with(SLH_PREFIX) {
                b.insts = mask_accesses(&b.insts);
            }
        }
    }
    if let Some(e) = program.entry_index() {
        let f = &mut program.functions[e as usize];
        let init = Inst::Const { dst: MASK_REG, imm: u64::MAX };
        let entered = f.blocks.iter().any(|b| b.insts.iter().any(|i| i.block_targets().contains(&0)));
        if entered {
            // Block 0 is a jump target: give the init its own prologue block.
            for b in &mut f.blocks {
                for i in &mut b.insts {
                    match i {
                        Inst::Br { taken, fallthrough, .. } => {
                            *taken += 1;
                            *fallthrough += 1;
                        }
                        Inst::Jmp { target } => *target += 1,
                        Inst::Jtab { targets, .. } => targets.iter_mut().for_each(|t| *t += 1),
                        _ => {}
                    }
                }
            }
            let label = fresh_label(&f.blocks, SLH_PREFIX, &mut 0);
            f.blocks.insert(0, Block { label, insts: alloc::vec![init, Inst::Jmp { target: 1 }] });
        } else if let Some(b) = f.blocks.first_mut() {
            b.insts.insert(0, init);
        }
    }
    Ok(Hardened { program, summary })
}

pub fn harden(p: &Program, mode: HardenMode, w: &Whitelist) -> Result<Hardened, HardenError> {
    match mode {
        HardenMode::Fence => Ok(fence_pass(p, w)),
        HardenMode::Slh => slh_pass(p, w),
    }
}

fn is_trampoline(p: &Program, func: FuncIdx, block: BlockIdx) -> bool {
    p.block(func, block)
        .is_some_and(|b| b.label.starts_with(FENCE_PREFIX) || b.label.starts_with(SLH_PREFIX))
}

/// BRs of a hardened program whose edges both go through trampolines.
pub fn instrumented_branches(p: &Program) -> BTreeSet<Loc> {
    p.branches()
        .into_iter()
        .filter(|l| match p.inst(*l) {
            Some(Inst::Br { taken, fallthrough, .. }) => {
                is_trampoline(p, l.func, *taken) && is_trampoline(p, l.func, *fallthrough)
            }
            _ => false,
        })
        .collect()
}

/// Replays `inputs` under exposure and keeps violations whose branch
/// sequence meets `set`.
pub fn verify_hardening<'a>(
    p: &Program,
    inputs: impl IntoIterator<Item = &'a [u8]>,
    spec: &SpecConfig,
    vm: &VmConfig,
    set: &BTreeSet<Loc>,
) -> Result<Vec<ViolationRecord>, EngineError> {
    let image = Image::new(p, vm.layout);
    let mut stats = BranchStats::default();
    let mut residual = BTreeSet::new();
    for input in inputs {
        let x = run_with_exposure(&image, input, vm, spec, &mut stats)?;
        residual.extend(x.trace.violations.into_iter().filter(|v| v.branches.iter().any(|b| set.contains(b))));
    }
    Ok(residual.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;

    const ONE_BR: &str = "entry main\nfn main:\nentry:\n  input r1, 0\n  cmp r1, 4\n  br lt, a, b\na:\n  halt\nb:\n  halt\n";

    #[test]
    fn fence_counts() {
        let p = parse_program(ONE_BR).unwrap();
        let h = fence_pass(&p, &Whitelist::default());
        let fences = h.program.iter_insts().filter(|(_, i)| **i == Inst::Fence).count();
        assert_eq!(fences, 2);
        assert_eq!(instrumented_branches(&h.program).len(), 1);
        let w = Whitelist { branches: [InstructionId::new("main", "entry", 2)].into(), ..Whitelist::default() };
        let h = fence_pass(&p, &w);
        assert_eq!(h.program, p);
        assert_eq!((h.summary.total, h.summary.instrumented, h.summary.whitelisted), (1, 0, 1));
    }

    #[test]
    fn slh_straight_line() {
        let p = parse_program("entry main\nfn main:\nentry:\n  const r1, 5\n  halt\n").unwrap();
        let h = slh_pass(&p, &Whitelist::default()).unwrap();
        assert_eq!(h.program.functions[0].blocks[0].insts.len(), 3);
        assert_eq!(h.program.functions[0].blocks[0].insts[0], Inst::Const { dst: MASK_REG, imm: u64::MAX });
    }

    #[test]
    fn slh_rejects_reserved() {
        let p = parse_program("entry main\nfn main:\nentry:\n  const r15, 5\n  halt\n").unwrap();
        assert!(matches!(slh_pass(&p, &Whitelist::default()), Err(HardenError::MaskRegisterInUse { .. })));
    }

    #[test]
    fn slh_prologue_when_entry_block_is_a_target() {
        let src = "entry main\nfn main:\ntop:\n  input r1, 0\n  cmp r1, 4\n  br lt, top, out\nout:\n  halt\n";
        let p = parse_program(src).unwrap();
        let h = slh_pass(&p, &Whitelist::default()).unwrap();
        let f = &h.program.functions[0];
        assert!(f.blocks[0].label.starts_with(SLH_PREFIX));
        assert_eq!(f.blocks[1].label, "top");
        assert_eq!(crate::isa::validate(&h.program).issues, Vec::new());
    }
}
