//! Architectural interpreter.
//!
//! A [`Machine`] is the (registers, memory, allocation table) triple. [`step`]
//! executes one instruction; every memory access is classified by
//! [`check_access`] and handed to an [`AccessPolicy`], which decides whether
//! the access proceeds. The architectural policy faults on anything outside a
//! valid region; the speculation engine and the oracle supply softer ones.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::isa::{Inst, Loc, Operand, Program, NUM_REGS};

pub const PAGE_SIZE: u64 = 4096;
/// Width in bytes of LOAD/STORE and of stack slots.
pub const WORD: u64 = 8;

/// Address-space layout. All fields are configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    /// The scratch page `[0, scratch_size)` is always mapped.
    pub scratch_size: u64,
    pub data_base: u64,
    pub stack_base: u64,
    /// Initial stack pointer; the stack grows down towards `stack_base`.
    pub stack_top: u64,
    pub heap_base: u64,
    /// Maximum heap extent in bytes.
    pub heap_limit: u64,
    pub redzone: u64,
    /// Referent search window for out-of-bounds classification.
    pub referent_window: u64,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            scratch_size: PAGE_SIZE,
            data_base: 0x1_0000,
            stack_base: 0x2_0000,
            stack_top: 0x3_0000,
            heap_base: 0x10_0000,
            heap_limit: 64 << 20,
            redzone: 16,
            referent_window: 4096,
        }
    }
}

/// Sparse byte-addressable memory. Pages materialize on first write; reads
/// of untouched pages see zeros. Whether an address may be touched at all is
/// decided by [`check_access`], not by page presence.
#[derive(Clone)]
pub struct Memory {
    pub layout: Layout,
    data_len: u64,
    pages: BTreeMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl Memory {
    pub fn new(layout: Layout, data: &[u8]) -> Memory {
        let mut m = Memory { layout, data_len: data.len() as u64, pages: BTreeMap::new() };
        for (i, b) in data.iter().enumerate() {
            m.write_byte(layout.data_base + i as u64, *b);
        }
        m
    }

    pub fn data_len(&self) -> u64 {
        self.data_len
    }

    pub fn read_byte(&self, addr: u64) -> u8 {
        self.pages
            .get(&(addr / PAGE_SIZE))
            .map_or(0, |p| p[(addr % PAGE_SIZE) as usize])
    }

    pub fn write_byte(&mut self, addr: u64, value: u8) {
        let page = self
            .pages
            .entry(addr / PAGE_SIZE)
            .or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
        page[(addr % PAGE_SIZE) as usize] = value;
    }

    pub fn read_word(&self, addr: u64) -> [u8; 8] {
        let mut out = [0u8; 8];
        for (i, b) in out.iter_mut().enumerate() {
            *b = self.read_byte(addr.wrapping_add(i as u64));
        }
        out
    }

    pub fn write_word(&mut self, addr: u64, bytes: [u8; 8]) {
        for (i, b) in bytes.iter().enumerate() {
            self.write_byte(addr.wrapping_add(i as u64), *b);
        }
    }

    pub fn read_u64(&self, addr: u64) -> u64 {
        u64::from_le_bytes(self.read_word(addr))
    }

    fn nonzero_pages(&self) -> impl Iterator<Item = (&u64, &Box<[u8; PAGE_SIZE as usize]>)> {
        self.pages.iter().filter(|(_, p)| p.iter().any(|b| *b != 0))
    }
}

impl PartialEq for Memory {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout
            && self.data_len == other.data_len
            && self.nonzero_pages().eq(other.nonzero_pages())
    }
}

impl Eq for Memory {}

impl fmt::Debug for Memory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Memory")
            .field("data_len", &self.data_len)
            .field("nonzero_pages", &self.nonzero_pages().map(|(n, _)| n * PAGE_SIZE).collect::<Vec<_>>())
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AllocRecord {
    pub base: u64,
    pub size: u64,
    pub live: bool,
    /// The ALLOC instruction that created this object.
    pub site: Loc,
}

impl AllocRecord {
    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    fn distance(&self, addr: u64) -> u64 {
        if addr < self.base {
            self.base - addr
        } else if addr >= self.end() {
            addr - (self.end() - 1)
        } else {
            0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("heap exhausted")]
pub struct HeapExhausted;

/// Bump allocator with redzones. Records are sorted by base.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocationTable {
    pub records: Vec<AllocRecord>,
    pub bump: u64,
    pub redzone: u64,
    heap_end: u64,
}

const ALIGN: u64 = 16;

fn align_up(v: u64) -> Option<u64> {
    v.checked_add(ALIGN - 1).map(|x| x & !(ALIGN - 1))
}

impl AllocationTable {
    pub fn new(layout: &Layout) -> AllocationTable {
        AllocationTable {
            records: Vec::new(),
            bump: align_up(layout.heap_base).unwrap_or(layout.heap_base),
            redzone: layout.redzone,
            heap_end: layout.heap_base.saturating_add(layout.heap_limit),
        }
    }

    /// Containing record, if `addr` lies inside a live object.
    pub fn containing(&self, addr: u64) -> Option<&AllocRecord> {
        let i = self.records.partition_point(|r| r.base <= addr);
        let r = self.records.get(i.checked_sub(1)?)?;
        (r.live && addr < r.end()).then_some(r)
    }

    /// Nearest live object within `window` bytes of `addr`; ties go to the
    /// lower base.
    pub fn nearest(&self, addr: u64, window: u64) -> Option<&AllocRecord> {
        let i = self.records.partition_point(|r| r.base <= addr);
        let below = i.checked_sub(1).and_then(|j| self.records.get(j)).filter(|r| r.live);
        let above = self.records.get(i).filter(|r| r.live);
        let best = match (below, above) {
            (Some(b), Some(a)) if a.distance(addr) < b.distance(addr) => Some(a),
            (Some(b), _) => Some(b),
            (None, a) => a,
        };
        best.filter(|r| r.distance(addr) <= window)
    }
}

/// Allocates `size` bytes (minimum 1) with a trailing redzone.
pub fn alloc_object(a: &mut AllocationTable, size: u64, site: Loc) -> Result<u64, HeapExhausted> {
    let size = size.max(1);
    let base = a.bump;
    let next = base
        .checked_add(size)
        .and_then(|v| v.checked_add(a.redzone))
        .and_then(align_up)
        .ok_or(HeapExhausted)?;
    if next > a.heap_end {
        return Err(HeapExhausted);
    }
    a.records.push(AllocRecord { base, size, live: true, site });
    a.bump = next;
    Ok(base)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AccessKind {
    Valid,
    Redzone,
    Unmapped,
    Scratch,
}

impl AccessKind {
    pub fn name(self) -> &'static str {
        match self {
            AccessKind::Valid => "VALID",
            AccessKind::Redzone => "REDZONE",
            AccessKind::Unmapped => "UNMAPPED",
            AccessKind::Scratch => "SCRATCH",
        }
    }

    pub fn is_safe(self) -> bool {
        matches!(self, AccessKind::Valid | AccessKind::Scratch)
    }
}

/// Classification of one access. For REDZONE and for UNMAPPED accesses near
/// an object, `referent` is that object and `offset = addr - base`, so
/// `base + offset` reproduces the accessed address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AccessClass {
    pub kind: AccessKind,
    pub referent: Option<AllocRecord>,
    pub offset: Option<i64>,
}

impl AccessClass {
    fn plain(kind: AccessKind) -> AccessClass {
        AccessClass { kind, referent: None, offset: None }
    }
}

/// Classifies the access `[addr, addr + width)`.
pub fn check_access(m: &Memory, a: &AllocationTable, addr: u64, width: u64) -> AccessClass {
    let l = &m.layout;
    let end = addr.checked_add(width);
    if let Some(end) = end {
        if end <= l.scratch_size {
            return AccessClass::plain(AccessKind::Scratch);
        }
        if m.data_len > 0 && addr >= l.data_base && end <= l.data_base + m.data_len {
            return AccessClass::plain(AccessKind::Valid);
        }
        if addr >= l.stack_base && end <= l.stack_top {
            return AccessClass::plain(AccessKind::Valid);
        }
        if a.containing(addr).is_some_and(|r| end <= r.end()) {
            return AccessClass::plain(AccessKind::Valid);
        }
    }
    match a.nearest(addr, l.referent_window) {
        Some(r) => {
            let lo = r.base.saturating_sub(a.redzone);
            let hi = r.end().saturating_add(a.redzone);
            let kind = if addr < hi && end.unwrap_or(u64::MAX) > lo {
                AccessKind::Redzone
            } else {
                AccessKind::Unmapped
            };
            AccessClass { kind, referent: Some(*r), offset: Some(addr.wrapping_sub(r.base) as i64) }
        }
        None => AccessClass::plain(AccessKind::Unmapped),
    }
}

/// Operands of the last CMP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Flags {
    pub lhs: u64,
    pub rhs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MachineState {
    pub regs: [u64; NUM_REGS],
    pub flags: Flags,
    pub pc: Loc,
    pub sp: u64,
    pub halted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Machine {
    pub cpu: MachineState,
    pub mem: Memory,
    pub heap: AllocationTable,
}

/// Tag in the top 16 bits of an encoded code address.
pub const CODE_TAG: u64 = 0xc0de;

/// Flat numbering of instructions, used to encode return addresses as
/// 64-bit values stored in VM memory.
#[derive(Clone, Debug)]
pub struct CodeMap {
    starts: Vec<(u64, Loc)>,
    total: u64,
}

impl CodeMap {
    pub fn new(p: &Program) -> CodeMap {
        let mut starts = Vec::new();
        let mut total = 0u64;
        for (fi, f) in p.functions.iter().enumerate() {
            for (bi, b) in f.blocks.iter().enumerate() {
                starts.push((total, Loc::block_start(fi as u32, bi as u32)));
                total += b.insts.len() as u64;
            }
        }
        CodeMap { starts, total }
    }

    fn flat(&self, loc: Loc) -> Option<u64> {
        let i = self
            .starts
            .partition_point(|(_, l)| (l.func, l.block) < (loc.func, loc.block));
        let (start, l) = self.starts.get(i)?;
        ((l.func, l.block) == (loc.func, loc.block)).then_some(start + loc.idx as u64)
    }

    pub fn encode(&self, loc: Loc) -> u64 {
        (CODE_TAG << 48) | self.flat(loc).expect("location belongs to the program")
    }

    pub fn decode(&self, value: u64) -> Option<Loc> {
        if value >> 48 != CODE_TAG {
            return None;
        }
        let flat = value & ((1 << 48) - 1);
        if flat >= self.total {
            return None;
        }
        let i = self.starts.partition_point(|(s, _)| *s <= flat) - 1;
        let (start, l) = self.starts[i];
        Some(Loc::new(l.func, l.block, (flat - start) as u32))
    }
}

/// A program prepared for execution.
#[derive(Clone, Debug)]
pub struct Image<'p> {
    pub program: &'p Program,
    pub code: CodeMap,
    pub layout: Layout,
    entry: Loc,
}

impl<'p> Image<'p> {
    /// `program` must be valid (see [`crate::isa::validate`]).
    pub fn new(program: &'p Program, layout: Layout) -> Image<'p> {
        let entry = Loc::block_start(program.entry_index().expect("entry function exists"), 0);
        Image { program, code: CodeMap::new(program), layout, entry }
    }

    pub fn boot(&self) -> Machine {
        Machine {
            cpu: MachineState {
                regs: [0; NUM_REGS],
                flags: Flags::default(),
                pc: self.entry,
                sp: self.layout.stack_top,
                halted: false,
            },
            mem: Memory::new(self.layout, &self.program.data),
            heap: AllocationTable::new(&self.layout),
        }
    }

    pub fn inst(&self, loc: Loc) -> &'p Inst {
        self.program.inst(loc).expect("pc resolves")
    }

    pub fn block_len(&self, loc: Loc) -> u32 {
        self.program.block(loc.func, loc.block).map_or(0, |b| b.insts.len() as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FaultKind {
    OobAccess(AccessClass),
    DivZero,
    BadJtabIndex { index: u64, len: u64 },
    BadRet { value: u64 },
    StackOverflow,
    HeapExhausted,
    StepLimit,
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::OobAccess(_) => "OOB-ACCESS",
            FaultKind::DivZero => "DIV-ZERO",
            FaultKind::BadJtabIndex { .. } => "BAD-JTAB-INDEX",
            FaultKind::BadRet { .. } => "BAD-RET",
            FaultKind::StackOverflow => "STACK-OVERFLOW",
            FaultKind::HeapExhausted => "HEAP-EXHAUSTED",
            FaultKind::StepLimit => "STEP-LIMIT",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fault {
    pub kind: FaultKind,
    pub at: Loc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Continued,
    Halted,
    Fault(Fault),
}

/// Decides what happens to memory accesses and observes writes.
pub trait AccessPolicy {
    /// Returns `true` if the access may proceed; `false` turns it into an
    /// OOB-ACCESS fault.
    fn admit(&mut self, at: Loc, addr: u64, store: bool, class: &AccessClass) -> bool;

    /// Called with the previous contents before every 8-byte memory write.
    fn will_write(&mut self, _addr: u64, _old: [u8; 8]) {}
}

/// Sanitizer-abort semantics: only VALID and SCRATCH accesses proceed.
#[derive(Clone, Copy, Debug, Default)]
pub struct Architectural;

impl AccessPolicy for Architectural {
    fn admit(&mut self, _at: Loc, _addr: u64, _store: bool, class: &AccessClass) -> bool {
        class.kind.is_safe()
    }
}

/// Executes exactly one instruction at `m.cpu.pc`.
pub fn step<P: AccessPolicy + ?Sized>(
    image: &Image<'_>,
    m: &mut Machine,
    input: &[u8],
    policy: &mut P,
) -> StepOutcome {
    let at = m.cpu.pc;
    let fault = |kind| StepOutcome::Fault(Fault { kind, at });
    let next = Loc::new(at.func, at.block, at.idx + 1);
    let cpu = &mut m.cpu;
    let val = |cpu: &MachineState, o: &Operand| match o {
        Operand::Reg(r) => cpu.regs[r.index()],
        Operand::Imm(v) => *v,
    };

    match image.inst(at) {
        Inst::Const { dst, imm } => cpu.regs[dst.index()] = *imm,
        Inst::Mov { dst, src } => cpu.regs[dst.index()] = cpu.regs[src.index()],
        Inst::Alu { op, dst, lhs, rhs } => {
            let b = val(cpu, rhs);
            match op.apply(cpu.regs[lhs.index()], b) {
                Some(v) => cpu.regs[dst.index()] = v,
                None => return fault(FaultKind::DivZero),
            }
        }
        Inst::Cmp { lhs, rhs } => {
            cpu.flags = Flags { lhs: cpu.regs[lhs.index()], rhs: val(cpu, rhs) };
        }
        Inst::SetCc { dst, cond } => {
            cpu.regs[dst.index()] = cond.eval(cpu.flags.lhs, cpu.flags.rhs) as u64;
        }
        Inst::Br { cond, taken, fallthrough } => {
            let target = if cond.eval(cpu.flags.lhs, cpu.flags.rhs) { taken } else { fallthrough };
            cpu.pc = Loc::block_start(at.func, *target);
            return StepOutcome::Continued;
        }
        Inst::Jmp { target } => {
            cpu.pc = Loc::block_start(at.func, *target);
            return StepOutcome::Continued;
        }
        Inst::Jtab { index, targets } => {
            let i = cpu.regs[index.index()];
            let Some(target) = targets.get(i as usize).filter(|_| i < targets.len() as u64) else {
                return fault(FaultKind::BadJtabIndex { index: i, len: targets.len() as u64 });
            };
            cpu.pc = Loc::block_start(at.func, *target);
            return StepOutcome::Continued;
        }
        Inst::Load { dst, base, offset } => {
            let addr = cpu.regs[base.index()].wrapping_add(*offset);
            let class = check_access(&m.mem, &m.heap, addr, WORD);
            if !policy.admit(at, addr, false, &class) {
                return fault(FaultKind::OobAccess(class));
            }
            m.cpu.regs[dst.index()] = m.mem.read_u64(addr);
        }
        Inst::Store { base, offset, src } => {
            let addr = cpu.regs[base.index()].wrapping_add(*offset);
            let value = cpu.regs[src.index()];
            let class = check_access(&m.mem, &m.heap, addr, WORD);
            if !policy.admit(at, addr, true, &class) {
                return fault(FaultKind::OobAccess(class));
            }
            policy.will_write(addr, m.mem.read_word(addr));
            m.mem.write_word(addr, value.to_le_bytes());
        }
        Inst::Alloc { dst, size } => {
            let size = val(cpu, size);
            match alloc_object(&mut m.heap, size, at) {
                Ok(base) => m.cpu.regs[dst.index()] = base,
                Err(HeapExhausted) => return fault(FaultKind::HeapExhausted),
            }
        }
        Inst::Call { func } => {
            let sp = cpu.sp.wrapping_sub(WORD);
            if cpu.sp < image.layout.stack_base + WORD || cpu.sp > image.layout.stack_top {
                return fault(FaultKind::StackOverflow);
            }
            let ret = image.code.encode(next);
            policy.will_write(sp, m.mem.read_word(sp));
            m.mem.write_word(sp, ret.to_le_bytes());
            m.cpu.sp = sp;
            m.cpu.pc = Loc::block_start(*func, 0);
            return StepOutcome::Continued;
        }
        Inst::Ret => {
            let sp = cpu.sp;
            if sp < image.layout.stack_base || sp.saturating_add(WORD) > image.layout.stack_top {
                return fault(FaultKind::BadRet { value: 0 });
            }
            let value = m.mem.read_u64(sp);
            match image.code.decode(value) {
                Some(loc) => {
                    m.cpu.sp = sp + WORD;
                    m.cpu.pc = loc;
                }
                None => return fault(FaultKind::BadRet { value }),
            }
            return StepOutcome::Continued;
        }
        Inst::Fence => {}
        Inst::Input { dst, offset } => {
            cpu.regs[dst.index()] = usize::try_from(*offset)
                .ok()
                .and_then(|o| input.get(o))
                .copied()
                .unwrap_or(0) as u64;
        }
        Inst::InputLen { dst } => cpu.regs[dst.index()] = input.len() as u64,
        Inst::Halt => {
            cpu.halted = true;
            return StepOutcome::Halted;
        }
    }
    m.cpu.pc = next;
    StepOutcome::Continued
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VmConfig {
    pub layout: Layout,
    pub max_steps: u64,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig { layout: Layout::default(), max_steps: 1_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunResult {
    pub machine: Machine,
    pub steps: u64,
    pub fault: Option<Fault>,
}

/// Runs until HALT, a fault, or the step limit (a STEP-LIMIT fault).
pub fn run_architectural(image: &Image<'_>, input: &[u8], cfg: &VmConfig) -> RunResult {
    let mut machine = image.boot();
    let mut steps = 0;
    loop {
        if steps >= cfg.max_steps {
            let fault = Fault { kind: FaultKind::StepLimit, at: machine.cpu.pc };
            return RunResult { machine, steps, fault: Some(fault) };
        }
        steps += 1;
        match step(image, &mut machine, input, &mut Architectural) {
            StepOutcome::Continued => {}
            StepOutcome::Halted => return RunResult { machine, steps, fault: None },
            StepOutcome::Fault(f) => return RunResult { machine, steps, fault: Some(f) },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;

    const SITE: Loc = Loc::new(0, 0, 0);

    fn run(src: &str, input: &[u8]) -> RunResult {
        let p = parse_program(src).unwrap();
        let image = Image::new(&p, Layout::default());
        run_architectural(&image, input, &VmConfig::default())
    }

    #[test]
    fn const_advances_pc() {
        let p = parse_program("fn main:\ne:\n  const r0, 7\n  halt\n").unwrap();
        let image = Image::new(&p, Layout::default());
        let mut m = image.boot();
        assert_eq!(step(&image, &mut m, &[], &mut Architectural), StepOutcome::Continued);
        assert_eq!(m.cpu.regs[0], 7);
        assert_eq!(m.cpu.pc, Loc::new(0, 0, 1));
    }

    #[test]
    fn halt_only_program_takes_one_step() {
        let r = run("fn main:\ne:\n  halt\n", &[]);
        assert_eq!(r.steps, 1);
        assert_eq!(r.fault, None);
        assert!(r.machine.cpu.halted);
    }

    #[test]
    fn load_past_end_is_redzone_fault() {
        let r = run("fn main:\ne:\n  alloc r1, 24\n  load r2, r1, 24\n  halt\n", &[]);
        let f = r.fault.unwrap();
        assert_eq!(f.at, Loc::new(0, 0, 1));
        let FaultKind::OobAccess(class) = f.kind else { panic!("{f:?}") };
        assert_eq!(class.kind, AccessKind::Redzone);
        assert_eq!(class.offset, Some(24));
        assert_eq!(class.referent.unwrap().size, 24);
    }

    #[test]
    fn classification_edges() {
        let layout = Layout::default();
        let mem = Memory::new(layout, b"abc");
        let mut heap = AllocationTable::new(&layout);
        let base = alloc_object(&mut heap, 32, SITE).unwrap();

        assert_eq!(check_access(&mem, &heap, base, 8).kind, AccessKind::Valid);
        let under = check_access(&mem, &heap, base - 1, 8);
        assert_eq!((under.kind, under.offset), (AccessKind::Redzone, Some(-1)));
        let straddle = check_access(&mem, &heap, base + 28, 8);
        assert_eq!((straddle.kind, straddle.offset), (AccessKind::Redzone, Some(28)));
        let near = check_access(&mem, &heap, base + 48, 8);
        assert_eq!((near.kind, near.offset), (AccessKind::Unmapped, Some(48)));
        let far = check_access(&mem, &heap, layout.heap_base + (10 << 20), 8);
        assert_eq!(far, AccessClass::plain(AccessKind::Unmapped));

        assert_eq!(check_access(&mem, &heap, 0, 8).kind, AccessKind::Scratch);
        assert_eq!(check_access(&mem, &heap, 4092, 8).kind, AccessKind::Unmapped);
        assert_eq!(check_access(&mem, &heap, layout.data_base, 1).kind, AccessKind::Valid);
        assert_eq!(check_access(&mem, &heap, layout.data_base, 8).kind, AccessKind::Unmapped);
        assert_eq!(check_access(&mem, &heap, layout.stack_top - 8, 8).kind, AccessKind::Valid);
        assert_eq!(check_access(&mem, &heap, u64::MAX - 3, 8).kind, AccessKind::Unmapped);
    }

    #[test]
    fn nearest_referent_ties_break_low() {
        let layout = Layout::default();
        let mem = Memory::new(layout, &[]);
        let mut heap = AllocationTable::new(&layout);
        let a = alloc_object(&mut heap, 8, SITE).unwrap();
        let b = alloc_object(&mut heap, 8, SITE).unwrap();
        assert_eq!(b - a, 32);
        // a ends at a+8; b starts at a+32. a+20 is 13 from a's last byte, 12 from b.
        assert_eq!(check_access(&mem, &heap, a + 20, 1).referent.unwrap().base, b);
        // a+19.5 does not exist; a+20 - 1 = a+19 is 12 from both.
        assert_eq!(check_access(&mem, &heap, a + 19, 1).referent.unwrap().base, a);
    }

    #[test]
    fn allocator_alignment_and_exhaustion() {
        let layout = Layout { heap_limit: 256, ..Layout::default() };
        let mut heap = AllocationTable::new(&layout);
        let a = alloc_object(&mut heap, 8, SITE).unwrap();
        let b = alloc_object(&mut heap, 8, SITE).unwrap();
        assert!(b - a >= 24);
        let c = alloc_object(&mut heap, 1, SITE).unwrap();
        assert_eq!(c % 16, 0);
        assert_eq!(alloc_object(&mut heap, 512, SITE), Err(HeapExhausted));
        assert_eq!(heap.records.len(), 3);
    }

    #[test]
    fn call_ret_and_smashed_return() {
        let ok = run("fn main:\ne:\n  call f\n  const r1, 1\n  halt\nfn f:\nb:\n  const r0, 5\n  ret\n", &[]);
        assert_eq!(ok.fault, None);
        assert_eq!((ok.machine.cpu.regs[0], ok.machine.cpu.regs[1]), (5, 1));
        assert_eq!(ok.machine.cpu.sp, Layout::default().stack_top);

        let smashed = run(
            "fn main:\ne:\n  call f\n  halt\nfn f:\nb:\n  const r1, 0x2fff8\n  store r1, 0, r1\n  ret\n",
            &[],
        );
        assert_eq!(smashed.fault.unwrap().kind, FaultKind::BadRet { value: 0x2fff8 });
    }

    #[test]
    fn faults() {
        assert_eq!(run("fn main:\ne:\n  div r0, r0, 0\n  halt\n", &[]).fault.unwrap().kind, FaultKind::DivZero);
        let j = run("fn main:\ne:\n  const r0, 2\n  jtab r0, [a, e]\na:\n  halt\n", &[]);
        assert_eq!(j.fault.unwrap().kind, FaultKind::BadJtabIndex { index: 2, len: 2 });
        let rec = run("fn main:\ne:\n  call main\n  halt\n", &[]);
        assert_eq!(rec.fault.unwrap().kind, FaultKind::StackOverflow);
        let top_ret = run("fn main:\ne:\n  ret\n", &[]);
        assert!(matches!(top_ret.fault.unwrap().kind, FaultKind::BadRet { .. }));
        let spin = run("fn main:\ne:\n  jmp e\n", &[]);
        assert_eq!(spin.fault.unwrap().kind, FaultKind::StepLimit);
    }

    #[test]
    fn input_beyond_length_reads_zero() {
        let r = run("fn main:\ne:\n  input r0, 1\n  input r1, 5\n  inputlen r2\n  halt\n", &[3, 9]);
        assert_eq!(&r.machine.cpu.regs[..3], &[9, 0, 2]);
    }

    #[test]
    fn code_map_round_trip() {
        let p = parse_program("fn main:\na:\n  jmp b\nb:\n  const r0, 1\n  halt\nfn g:\nc:\n  ret\n").unwrap();
        let map = CodeMap::new(&p);
        for (loc, _) in p.iter_insts() {
            assert_eq!(map.decode(map.encode(loc)), Some(loc));
        }
        assert_eq!(map.decode((CODE_TAG << 48) | 4), None);
        assert_eq!(map.decode(0x41), None);
    }
}
