//! Exhaustive enumeration of speculative paths by re-execution.
//!
//! Every path is replayed from program start: the program runs
//! architecturally up to the root branch occurrence, takes the wrong
//! outcome, and from there follows a script naming which later branch
//! occurrences to invert. No checkpoints and no undo log are involved;
//! every script gets a fresh machine.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::detect::{signature, CodeDetail, IdentityMode, Signature, ViolationRecord};
use crate::isa::{Inst, Loc};
use crate::vm::{step, AccessClass, AccessKind, AccessPolicy, Architectural, FaultKind, Image, Machine, StepOutcome, VmConfig};

/// Upper bound on the number of scripts one enumeration may run.
pub const MAX_SCRIPTS: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleConfig {
    pub max_order: u32,
    pub window: u64,
    pub stride: u64,
    pub vm: VmConfig,
    pub mode: IdentityMode,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { max_order: 1, window: 250, stride: 50, vm: VmConfig::default(), mode: IdentityMode::Offset }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("enumeration too large: more than {0} scripts")]
    EnumerationTooLarge(usize),
}

/// One replayed path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptRun {
    /// Architectural branch occurrence the path is rooted at.
    pub root: usize,
    /// Inverted speculative branch occurrences, counted from 0 after the root.
    pub script: Vec<usize>,
    /// Blocks on the path: the root's block, then every block the path got
    /// to execute in.
    pub blocks: Vec<Loc>,
    pub records: Vec<ViolationRecord>,
    /// Branch occurrences met on the path.
    pub occurrences: usize,
}

struct Recorder {
    hits: Vec<(Loc, u64, AccessClass)>,
}

impl AccessPolicy for Recorder {
    fn admit(&mut self, at: Loc, addr: u64, _store: bool, class: &AccessClass) -> bool {
        match class.kind {
            AccessKind::Valid | AccessKind::Scratch => true,
            AccessKind::Redzone => {
                self.hits.push((at, addr, *class));
                true
            }
            AccessKind::Unmapped => {
                self.hits.push((at, addr, *class));
                false
            }
        }
    }
}

/// Number of architectural branch executions (tree roots) on `input`.
pub fn count_roots(image: &Image<'_>, input: &[u8], vm: &VmConfig) -> usize {
    let mut m = image.boot();
    let mut roots = 0;
    for _ in 0..vm.max_steps {
        if matches!(image.inst(m.cpu.pc), Inst::Br { .. }) {
            roots += 1;
        }
        if step(image, &mut m, input, &mut Architectural) != StepOutcome::Continued {
            break;
        }
    }
    roots
}

/// Machine state just before the `root`-th architectural branch executes.
fn advance_to_root(image: &Image<'_>, input: &[u8], vm: &VmConfig, root: usize) -> Option<Machine> {
    let mut m = image.boot();
    let mut seen = 0;
    for _ in 0..vm.max_steps {
        if matches!(image.inst(m.cpu.pc), Inst::Br { .. }) {
            if seen == root {
                return Some(m);
            }
            seen += 1;
        }
        if step(image, &mut m, input, &mut Architectural) != StepOutcome::Continued {
            return None;
        }
    }
    None
}

fn branch_target(image: &Image<'_>, m: &Machine, at: Loc, invert: bool) -> Loc {
    let Inst::Br { cond, taken, fallthrough } = image.inst(at) else { unreachable!() };
    let outcome = cond.eval(m.cpu.flags.lhs, m.cpu.flags.rhs) != invert;
    Loc::block_start(at.func, if outcome { *taken } else { *fallthrough })
}

/// Replays one script. `None` if the root occurrence is never reached.
pub fn replay(image: &Image<'_>, input: &[u8], cfg: &OracleConfig, root: usize, script: &[usize]) -> Option<ScriptRun> {
    let mut m = advance_to_root(image, input, &cfg.vm, root)?;
    let root_at = m.cpu.pc;
    let mut run = ScriptRun {
        root,
        script: script.to_vec(),
        blocks: alloc::vec![Loc::block_start(root_at.func, root_at.block)],
        records: Vec::new(),
        occurrences: 0,
    };
    let mut branches = alloc::vec![root_at];
    m.cpu.pc = branch_target(image, &m, root_at, true);
    let mut used: u64 = 0;
    let stride = cfg.stride.max(1);

    loop {
        let at = m.cpu.pc;
        if (at.idx as u64).is_multiple_of(stride) {
            let remaining = image.block_len(at) as u64 - at.idx as u64;
            used += if remaining < stride { remaining } else { stride };
            if used >= cfg.window {
                break;
            }
        }
        if at.idx == 0 {
            run.blocks.push(at);
        }
        match image.inst(at) {
            Inst::Fence | Inst::Halt => break,
            Inst::Br { .. } => {
                let occurrence = run.occurrences;
                run.occurrences += 1;
                let invert = script.contains(&occurrence);
                if invert {
                    branches.push(at);
                }
                m.cpu.pc = branch_target(image, &m, at, invert);
                continue;
            }
            _ => {}
        }
        let mut rec = Recorder { hits: Vec::new() };
        let out = step(image, &mut m, input, &mut rec);
        for (at, addr, class) in rec.hits {
            run.records.push(ViolationRecord::data(at, addr, class, branches.clone()));
        }
        match out {
            StepOutcome::Continued => {}
            StepOutcome::Halted => break,
            StepOutcome::Fault(f) => {
                match f.kind {
                    FaultKind::BadRet { value } => {
                        let detail = CodeDetail::BadRet { value };
                        run.records.push(ViolationRecord::code(f.at, m.cpu.sp, detail, branches.clone()));
                    }
                    FaultKind::BadJtabIndex { index, len } => {
                        let detail = CodeDetail::BadJtab { index, len };
                        run.records.push(ViolationRecord::code(f.at, index, detail, branches.clone()));
                    }
                    _ => {}
                }
                break;
            }
        }
    }
    Some(run)
}

/// Replays every script of every tree, depth-first, wrong outcomes first.
pub fn trace_scripts(image: &Image<'_>, input: &[u8], cfg: &OracleConfig) -> Result<Vec<ScriptRun>, OracleError> {
    let mut out = Vec::new();
    if cfg.max_order == 0 {
        return Ok(out);
    }
    let roots = count_roots(image, input, &cfg.vm);
    for root in 0..roots {
        let mut pending: Vec<Vec<usize>> = alloc::vec![Vec::new()];
        while let Some(script) = pending.pop() {
            if out.len() >= MAX_SCRIPTS {
                return Err(OracleError::EnumerationTooLarge(MAX_SCRIPTS));
            }
            let Some(run) = replay(image, input, cfg, root, &script) else { break };
            if 1 + script.len() < cfg.max_order as usize {
                let first = script.last().map_or(0, |l| l + 1);
                for j in (first..run.occurrences).rev() {
                    let mut next = script.clone();
                    next.push(j);
                    pending.push(next);
                }
            }
            out.push(run);
        }
    }
    Ok(out)
}

/// All violations reachable with at most `cfg.max_order` mispredictions.
pub fn enumerate_records(
    image: &Image<'_>,
    input: &[u8],
    cfg: &OracleConfig,
) -> Result<BTreeSet<ViolationRecord>, OracleError> {
    Ok(trace_scripts(image, input, cfg)?.into_iter().flat_map(|r| r.records).collect())
}

/// [`enumerate_records`] reduced to signatures under `cfg.mode`.
pub fn enumerate_paths(image: &Image<'_>, input: &[u8], cfg: &OracleConfig) -> Result<BTreeSet<Signature>, OracleError> {
    Ok(enumerate_records(image, input, cfg)?.iter().map(|r| signature(r, cfg.mode)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;
    use crate::vm::Layout;
    use alloc::string::String;

    #[test]
    fn straight_line_is_empty() {
        let p = parse_program("fn main:\ne:\n  alloc r0, 8\n  load r1, r0, 64\n  halt\n").unwrap();
        let image = Image::new(&p, Layout::default());
        let cfg = OracleConfig { max_order: 3, ..OracleConfig::default() };
        assert!(enumerate_paths(&image, &[], &cfg).unwrap().is_empty());
    }

    fn nesting_program(pad: usize) -> String {
        let body = |name: &str, tail: &str| {
            let mut s = alloc::format!("{name}:\n");
            for _ in 0..pad {
                s.push_str("  const r1, 1\n");
            }
            s.push_str(tail);
            s
        };
        let mut src = String::from("fn main:\n");
        src += &body("A", "  cmp r0, 0\n  br eq, B, C\n");
        src += &body("B", "  cmp r0, 0\n  br eq, D, B\n");
        src += &body("C", "  cmp r0, 0\n  br eq, B, C\n");
        src += &body("D", "  cmp r0, 0\n  halt\n");
        src
    }

    #[test]
    fn nesting_census() {
        let p = parse_program(&nesting_program(3)).unwrap();
        let image = Image::new(&p, Layout::default());
        let cfg = OracleConfig { max_order: 3, window: 4 * 5, stride: 50, ..OracleConfig::default() };
        let runs = trace_scripts(&image, &[], &cfg).unwrap();
        let f = &p.functions[0];
        let label = |l: &Loc| f.blocks[l.block as usize].label.clone();
        // The tree rooted at A, the first architectural branch.
        let paths: BTreeSet<String> =
            runs.iter().filter(|r| r.root == 0).map(|r| r.blocks.iter().map(label).collect()).collect();
        let expected: BTreeSet<String> = ["ACBD", "ACBB", "ACCB", "ACCC"].iter().map(|s| String::from(*s)).collect();
        assert_eq!(paths, expected);
    }

    #[test]
    fn script_guard() {
        // The wrong edge of the only root enters a 400-iteration loop whose
        // second branch goes to the loop head either way; with order 3 there
        // are more than C(400, 2) scripts.
        let src = "fn main:\ne:\n  const r0, 0\n  cmp r0, 1\n  br eq, s, done\ns:\n  const r1, 0\n  jmp l\nl:\n  add r1, r1, 1\n  cmp r1, 400\n  br lt, m, done\nm:\n  br eq, l, l\ndone:\n  halt\n";
        let p = parse_program(src).unwrap();
        let image = Image::new(&p, Layout::default());
        let cfg = OracleConfig { max_order: 3, window: 1 << 40, ..OracleConfig::default() };
        assert_eq!(enumerate_paths(&image, &[], &cfg), Err(OracleError::EnumerationTooLarge(MAX_SCRIPTS)));
    }
}
