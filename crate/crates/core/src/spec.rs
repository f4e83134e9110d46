//! Speculation exposure.
//!
//! Before each architectural conditional branch executes, the engine explores
//! a simulation tree rooted at it: the wrong outcome is taken under a
//! checkpoint, nested branches inside the wrong path fork again while the
//! depth allows, and every path ends in a rollback. Writes made on wrong
//! paths are undone from a log, so the architectural run is unaffected.
//!
//! Instruction accounting: a single counter is zeroed at tree entry. On each
//! block entry it grows by the block length; blocks longer than the stride
//! are charged one stride-sized chunk at a time, every `stride` instructions.
//! A path ends when a charge brings the counter to the window or beyond.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::detect::{on_speculative_access, on_speculative_fault, AccessHit, AccessVerdict, CodeDetail, ViolationRecord};
use crate::isa::{Inst, Loc};
use crate::vm::{
    step, AccessClass, AccessPolicy, Architectural, Fault, FaultKind, Image, Machine, MachineState, RunResult,
    StepOutcome, VmConfig,
};

/// How a branch's order is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    /// Order grows with the branch's execution count (see [`allowed_order`]).
    #[default]
    Prioritized,
    /// Every tree is explored up to the cap.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecConfig {
    pub window: u64,
    pub stride: u64,
    pub max_order: u32,
    pub order_base: u64,
    pub enabled: bool,
    pub schedule: Schedule,
}

impl Default for SpecConfig {
    fn default() -> Self {
        SpecConfig { window: 250, stride: 50, max_order: 6, order_base: 4, enabled: true, schedule: Schedule::Prioritized }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("window must be at least 1")]
    Window,
    #[error("stride must be at least 1")]
    Stride,
    #[error("max order must be at least 1")]
    MaxOrder,
    #[error("order base must be at least 2")]
    OrderBase,
}

impl SpecConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window < 1 {
            return Err(ConfigError::Window);
        }
        if self.stride < 1 {
            return Err(ConfigError::Stride);
        }
        if self.max_order < 1 {
            return Err(ConfigError::MaxOrder);
        }
        if self.order_base < 2 {
            return Err(ConfigError::OrderBase);
        }
        Ok(())
    }

    /// Order used for a tree whose root has been observed `n` times.
    pub fn order_for(&self, n: u64) -> u32 {
        match self.schedule {
            Schedule::Prioritized => allowed_order(n, self),
            Schedule::Fixed => self.max_order,
        }
    }
}

/// `1 + max{j : base^j divides n}`, clamped to `[1, max_order]`.
pub fn allowed_order(n: u64, cfg: &SpecConfig) -> u32 {
    let cap = cfg.max_order.max(1);
    let mut k = 1;
    let mut p = cfg.order_base;
    while k < cap && n != 0 && n.is_multiple_of(p) {
        k += 1;
        match p.checked_mul(cfg.order_base) {
            Some(next) => p = next,
            None => break,
        }
    }
    k
}

/// Source of per-branch execution counts.
pub trait BranchCounter {
    /// Counts one more run executing `branch` and returns the new count.
    fn observe(&mut self, branch: Loc) -> u64;
}

/// Number of runs that executed each branch architecturally.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BranchStats {
    pub counts: BTreeMap<Loc, u64>,
}

impl BranchStats {
    pub fn get(&self, branch: Loc) -> u64 {
        self.counts.get(&branch).copied().unwrap_or(0)
    }
}

impl BranchCounter for BranchStats {
    fn observe(&mut self, branch: Loc) -> u64 {
        let c = self.counts.entry(branch).or_insert(0);
        *c += 1;
        *c
    }
}

/// Everything a run observed beyond its architectural result.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunTrace {
    /// Distinct violations in discovery order.
    pub violations: Vec<ViolationRecord>,
    /// Architectural branch edges `(branch, taken)` with hit counts.
    pub edges: BTreeMap<(Loc, bool), u64>,
    /// Order explored at each branch that rooted a tree.
    pub orders: BTreeMap<Loc, u32>,
    pub arch_steps: u64,
    pub spec_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exposure {
    pub trace: RunTrace,
    pub result: RunResult,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("checkpoint overflow: {0} frames")]
    CheckpointOverflow(usize),
    #[error("internal log underflow")]
    LogUnderflow,
}

#[derive(Clone, Debug)]
struct Checkpoint {
    cpu: MachineState,
    heap_len: usize,
    bump: u64,
    counter: u64,
    log_start: usize,
    branch: Loc,
    #[allow(dead_code)]
    depth: u32,
}

/// Records speculative accesses and logs writes for undo.
struct SpecPolicy<'a> {
    log: &'a mut Vec<(u64, [u8; 8])>,
    hits: &'a mut Vec<AccessHit>,
}

impl AccessPolicy for SpecPolicy<'_> {
    fn admit(&mut self, at: Loc, addr: u64, _store: bool, class: &AccessClass) -> bool {
        let verdict = on_speculative_access(class);
        if verdict != AccessVerdict::Proceed {
            self.hits.push(AccessHit { at, addr, class: *class });
        }
        verdict != AccessVerdict::RollbackAfterRecord
    }

    fn will_write(&mut self, addr: u64, old: [u8; 8]) {
        self.log.push((addr, old));
    }
}

/// Checkpoint stack, write log and traversal state for one run.
pub struct Engine<'i, 'p> {
    image: &'i Image<'p>,
    cfg: SpecConfig,
    frames: Vec<Checkpoint>,
    log: Vec<(u64, [u8; 8])>,
    counter: u64,
    order: u32,
    hits: Vec<AccessHit>,
    seen: BTreeSet<ViolationRecord>,
    trace: RunTrace,
}

impl<'i, 'p> Engine<'i, 'p> {
    pub fn new(image: &'i Image<'p>, cfg: SpecConfig) -> Self {
        Engine {
            image,
            cfg,
            frames: Vec::new(),
            log: Vec::new(),
            counter: 0,
            order: cfg.max_order,
            hits: Vec::new(),
            seen: BTreeSet::new(),
            trace: RunTrace::default(),
        }
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    pub fn log_len(&self) -> usize {
        self.log.len()
    }

    pub fn violations(&self) -> &[ViolationRecord] {
        &self.trace.violations
    }

    /// Snapshots `m` before forking at branch `at`.
    pub fn push_checkpoint(&mut self, m: &Machine, at: Loc) -> Result<usize, EngineError> {
        if self.frames.len() > self.cfg.max_order as usize {
            return Err(EngineError::CheckpointOverflow(self.frames.len() + 1));
        }
        let depth = self.frames.len() as u32 + 1;
        self.frames.push(Checkpoint {
            cpu: m.cpu,
            heap_len: m.heap.records.len(),
            bump: m.heap.bump,
            counter: self.counter,
            log_start: self.log.len(),
            branch: at,
            depth,
        });
        Ok(self.frames.len())
    }

    /// Undoes the innermost frame and returns the branch it was pushed at;
    /// `m.cpu.pc` is back on that branch.
    pub fn rollback(&mut self, m: &mut Machine) -> Result<Loc, EngineError> {
        let frame = self.frames.pop().ok_or(EngineError::LogUnderflow)?;
        if frame.log_start > self.log.len() || frame.heap_len > m.heap.records.len() {
            return Err(EngineError::LogUnderflow);
        }
        while self.log.len() > frame.log_start {
            let (addr, old) = self.log.pop().ok_or(EngineError::LogUnderflow)?;
            m.mem.write_word(addr, old);
        }
        m.cpu = frame.cpu;
        m.heap.records.truncate(frame.heap_len);
        m.heap.bump = frame.bump;
        self.counter = frame.counter;
        Ok(frame.branch)
    }

    /// Steps one instruction with speculative access semantics, logging
    /// writes and recording violations against the current frames.
    pub fn exec(&mut self, m: &mut Machine, input: &[u8]) -> StepOutcome {
        self.trace.spec_steps += 1;
        let out = step(self.image, m, input, &mut SpecPolicy { log: &mut self.log, hits: &mut self.hits });
        let hits = core::mem::take(&mut self.hits);
        for h in hits {
            let r = ViolationRecord::data(h.at, h.addr, h.class, self.branches());
            self.record(r);
        }
        if let StepOutcome::Fault(Fault { kind, at }) = out {
            if let Some(detail) = on_speculative_fault(&kind) {
                let addr = match detail {
                    CodeDetail::BadRet { .. } => m.cpu.sp,
                    CodeDetail::BadJtab { index, .. } => index,
                };
                let r = ViolationRecord::code(at, addr, detail, self.branches());
                self.record(r);
            }
        }
        out
    }

    fn branches(&self) -> Vec<Loc> {
        self.frames.iter().map(|f| f.branch).collect()
    }

    fn record(&mut self, r: ViolationRecord) {
        if self.seen.insert(r.clone()) {
            self.trace.violations.push(r);
        }
    }

    fn mispredict(&self, m: &mut Machine, at: Loc) {
        let Inst::Br { cond, taken, fallthrough } = self.image.inst(at) else {
            unreachable!("fork at a non-branch")
        };
        let wrong = if cond.eval(m.cpu.flags.lhs, m.cpu.flags.rhs) { fallthrough } else { taken };
        m.cpu.pc = Loc::block_start(at.func, *wrong);
    }

    /// Explores the tree rooted at architectural branch `root` with order
    /// `order`; returns with `m` restored and `m.cpu.pc == root`.
    pub fn explore(&mut self, m: &mut Machine, input: &[u8], root: Loc, order: u32) -> Result<(), EngineError> {
        self.order = order.min(self.cfg.max_order);
        if self.order == 0 {
            return Ok(());
        }
        self.counter = 0;
        self.push_checkpoint(m, root)?;
        self.mispredict(m, root);
        loop {
            self.path(m, input)?;
            self.rollback(m)?;
            if self.frames.is_empty() {
                if !self.log.is_empty() {
                    return Err(EngineError::LogUnderflow);
                }
                return Ok(());
            }
            // Resume the correct outcome of the nested branch.
            self.exec(m, input);
        }
    }

    /// Runs the current speculative path until it terminates.
    fn path(&mut self, m: &mut Machine, input: &[u8]) -> Result<(), EngineError> {
        let stride = self.cfg.stride.max(1);
        loop {
            let at = m.cpu.pc;
            let idx = at.idx as u64;
            if idx.is_multiple_of(stride) {
                let len = self.image.block_len(at) as u64;
                self.counter += stride.min(len.saturating_sub(idx));
                if self.counter >= self.cfg.window {
                    return Ok(());
                }
            }
            match self.image.inst(at) {
                Inst::Fence | Inst::Halt => return Ok(()),
                Inst::Br { .. } if self.frames.len() < self.order as usize => {
                    self.push_checkpoint(m, at)?;
                    self.mispredict(m, at);
                    continue;
                }
                _ => {}
            }
            match self.exec(m, input) {
                StepOutcome::Continued => {}
                StepOutcome::Halted | StepOutcome::Fault(_) => return Ok(()),
            }
        }
    }
}

/// Runs `image` architecturally, exploring a simulation tree before every
/// conditional branch. The architectural result equals
/// [`crate::vm::run_architectural`]'s.
///
/// `stats` is consulted once per branch per run: the first time a branch
/// executes, its count is bumped and the tree order fixed for the rest of
/// the run.
pub fn run_with_exposure(
    image: &Image<'_>,
    input: &[u8],
    vm: &VmConfig,
    cfg: &SpecConfig,
    stats: &mut dyn BranchCounter,
) -> Result<Exposure, EngineError> {
    let mut engine = Engine::new(image, *cfg);
    let mut m = image.boot();
    let mut orders: BTreeMap<Loc, u32> = BTreeMap::new();
    let mut steps = 0u64;
    let fault = loop {
        if steps >= vm.max_steps {
            break Some(Fault { kind: FaultKind::StepLimit, at: m.cpu.pc });
        }
        let pc = m.cpu.pc;
        if let Inst::Br { cond, .. } = image.inst(pc) {
            let order = *orders.entry(pc).or_insert_with(|| cfg.order_for(stats.observe(pc)));
            if cfg.enabled {
                engine.explore(&mut m, input, pc, order)?;
            }
            let taken = cond.eval(m.cpu.flags.lhs, m.cpu.flags.rhs);
            *engine.trace.edges.entry((pc, taken)).or_insert(0) += 1;
        }
        steps += 1;
        match step(image, &mut m, input, &mut Architectural) {
            StepOutcome::Continued => {}
            StepOutcome::Halted => break None,
            StepOutcome::Fault(f) => break Some(f),
        }
    };
    let mut trace = engine.trace;
    trace.arch_steps = steps;
    if cfg.enabled {
        trace.orders = orders;
    }
    Ok(Exposure { trace, result: RunResult { machine: m, steps, fault } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;
    use crate::vm::{run_architectural, Layout};

    fn fixed(window: u64, stride: u64, max_order: u32) -> SpecConfig {
        SpecConfig { window, stride, max_order, schedule: Schedule::Fixed, ..SpecConfig::default() }
    }

    #[test]
    fn allowed_order_examples() {
        let cfg = SpecConfig::default();
        let got: Vec<u32> = [1, 2, 4, 8, 16, 64, 4096].iter().map(|n| allowed_order(*n, &cfg)).collect();
        assert_eq!(got, [1, 1, 2, 2, 3, 4, 6]);
        assert_eq!(allowed_order(1 << 62, &cfg), 6);
        let c2 = SpecConfig { order_base: 2, max_order: 100, ..cfg };
        assert_eq!(allowed_order(1 << 63, &c2), 64);
    }

    #[test]
    fn validate_rejects_bad_values() {
        let ok = SpecConfig::default();
        assert_eq!(ok.validate(), Ok(()));
        assert_eq!(SpecConfig { window: 0, ..ok }.validate(), Err(ConfigError::Window));
        assert_eq!(SpecConfig { stride: 0, ..ok }.validate(), Err(ConfigError::Stride));
        assert_eq!(SpecConfig { max_order: 0, ..ok }.validate(), Err(ConfigError::MaxOrder));
        assert_eq!(SpecConfig { order_base: 1, ..ok }.validate(), Err(ConfigError::OrderBase));
    }

    #[test]
    fn straight_line_has_no_speculation() {
        let p = parse_program("fn main:\ne:\n  alloc r0, 8\n  store r0, 0, r0\n  halt\n").unwrap();
        let image = Image::new(&p, Layout::default());
        let x = run_with_exposure(&image, &[], &VmConfig::default(), &SpecConfig::default(), &mut BranchStats::default())
            .unwrap();
        assert!(x.trace.violations.is_empty());
        assert_eq!(x.trace.spec_steps, 0);
        assert_eq!(x.trace.arch_steps, 3);
    }

    const STORM: &str = "fn main:\ne:\n  alloc r0, 800\n  const r1, 0\n  jmp l\nl:\n  store r0, 0, r1\n  add r0, r0, 8\n  add r1, r1, 1\n  cmp r1, 100\n  br lt, l, d\nd:\n  alloc r2, 32\n  halt\n";

    #[test]
    fn rollback_restores_write_storm_and_allocator() {
        let p = parse_program(STORM).unwrap();
        let image = Image::new(&p, Layout::default());
        let mut m = image.boot();
        // Run the prefix architecturally so memory has something to clobber.
        for _ in 0..3 {
            step(&image, &mut m, &[], &mut Architectural);
        }
        let mut engine = Engine::new(&image, fixed(10_000, 50, 3));
        let before = m.clone();
        engine.push_checkpoint(&m, m.cpu.pc).unwrap();
        let mut writes = 0;
        while !matches!(image.inst(m.cpu.pc), Inst::Halt) {
            if matches!(image.inst(m.cpu.pc), Inst::Store { .. }) {
                writes += 1;
            }
            assert_eq!(engine.exec(&mut m, &[]), StepOutcome::Continued);
        }
        assert_eq!(writes, 100);
        assert_eq!(engine.log_len(), 100);
        assert_ne!(m, before);
        assert_eq!(m.heap.records.len(), 2);
        engine.rollback(&mut m).unwrap();
        assert_eq!(m, before);
        assert_eq!(engine.log_len(), 0);
        let base = m.cpu.regs[0];
        for i in 0..800 {
            assert_eq!(m.mem.read_byte(base + i), 0);
        }
    }

    #[test]
    fn nested_rollbacks_and_counter() {
        let p = parse_program(STORM).unwrap();
        let image = Image::new(&p, Layout::default());
        let mut m = image.boot();
        let mut engine = Engine::new(&image, fixed(10_000, 50, 3));
        let before = m.clone();
        engine.counter = 7;
        engine.push_checkpoint(&m, m.cpu.pc).unwrap();
        for _ in 0..5 {
            engine.exec(&mut m, &[]);
        }
        engine.counter = 40;
        let mid = m.clone();
        engine.push_checkpoint(&m, m.cpu.pc).unwrap();
        for _ in 0..20 {
            engine.exec(&mut m, &[]);
        }
        engine.counter = 90;
        engine.rollback(&mut m).unwrap();
        assert_eq!(engine.counter, 40);
        assert_eq!(m, mid);
        engine.rollback(&mut m).unwrap();
        assert_eq!(engine.counter, 7);
        assert_eq!(m, before);
        assert_eq!(engine.rollback(&mut m), Err(EngineError::LogUnderflow));
    }

    #[test]
    fn speculative_call_is_undone() {
        let src = "fn main:\ne:\n  cmp r0, 0\n  br eq, a, b\na:\n  halt\nb:\n  call f\n  halt\nfn f:\nx:\n  ret\n";
        let p = parse_program(src).unwrap();
        let image = Image::new(&p, Layout::default());
        let x = run_with_exposure(&image, &[], &VmConfig::default(), &fixed(250, 50, 1), &mut BranchStats::default())
            .unwrap();
        let plain = run_architectural(&image, &[], &VmConfig::default());
        assert_eq!(x.result, plain);
        assert_eq!(x.trace.spec_steps, 2);
    }

    #[test]
    fn checkpoint_overflow_guard() {
        let p = parse_program("fn main:\ne:\n  halt\n").unwrap();
        let image = Image::new(&p, Layout::default());
        let m = image.boot();
        let mut engine = Engine::new(&image, fixed(250, 50, 1));
        engine.push_checkpoint(&m, m.cpu.pc).unwrap();
        engine.push_checkpoint(&m, m.cpu.pc).unwrap();
        assert_eq!(engine.push_checkpoint(&m, m.cpu.pc), Err(EngineError::CheckpointOverflow(3)));
    }

    #[test]
    fn stats_count_runs_not_iterations() {
        let p = parse_program(STORM).unwrap();
        let image = Image::new(&p, Layout::default());
        let mut stats = BranchStats::default();
        for _ in 0..3 {
            run_with_exposure(&image, &[], &VmConfig::default(), &SpecConfig::default(), &mut stats).unwrap();
        }
        let br = p.branches()[0];
        assert_eq!(stats.get(br), 3);
    }
}
