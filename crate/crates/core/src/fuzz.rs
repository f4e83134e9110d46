//! Fuzzing primitives: mutators, architectural coverage, vulnerability
//! feedback and a single-threaded campaign loop.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::detect::{dedup_key, DedupKey, IdentityMode, ViolationRecord};
use crate::isa::Loc;
use crate::spec::{run_with_exposure, BranchCounter, EngineError, Exposure, RunTrace, SpecConfig};
use crate::vm::{Fault, Image, VmConfig};

/// Stable identity of an input: the first 8 bytes of its SHA-256.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InputId(pub u64);

impl InputId {
    pub fn of(bytes: &[u8]) -> InputId {
        let digest = Sha256::digest(bytes);
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        InputId(u64::from_be_bytes(head))
    }
}

impl fmt::Display for InputId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl core::str::FromStr for InputId {
    type Err = core::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(InputId)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MutationOp {
    BitFlip,
    ByteSet,
    Insert,
    Delete,
    Splice,
}

impl MutationOp {
    pub const ALL: [MutationOp; 5] =
        [MutationOp::BitFlip, MutationOp::ByteSet, MutationOp::Insert, MutationOp::Delete, MutationOp::Splice];

    pub fn name(self) -> &'static str {
        match self {
            MutationOp::BitFlip => "bitflip",
            MutationOp::ByteSet => "byteset",
            MutationOp::Insert => "insert",
            MutationOp::Delete => "delete",
            MutationOp::Splice => "splice",
        }
    }

    pub fn from_name(s: &str) -> Option<MutationOp> {
        MutationOp::ALL.into_iter().find(|op| op.name() == s)
    }
}

const INTERESTING: [u8; 10] = [0, 1, 7, 8, 15, 16, 17, 0x7f, 0x80, 0xff];

/// Maximum number of ops stacked by one [`mutate`] call.
pub const MAX_STACK: usize = 8;

fn random_byte<R: Rng + ?Sized>(rng: &mut R) -> u8 {
    if rng.gen_bool(0.5) {
        *INTERESTING.choose(rng).unwrap()
    } else {
        rng.gen()
    }
}

/// Applies one mutation op in place. Splice without a partner is a no-op.
pub fn apply_op<R: Rng + ?Sized>(op: MutationOp, buf: &mut Vec<u8>, partner: Option<&[u8]>, max_len: usize, rng: &mut R) {
    match op {
        MutationOp::BitFlip => {
            if !buf.is_empty() {
                let i = rng.gen_range(0..buf.len());
                buf[i] ^= 1 << rng.gen_range(0..8);
            }
        }
        MutationOp::ByteSet => {
            if !buf.is_empty() {
                let i = rng.gen_range(0..buf.len());
                buf[i] = random_byte(rng);
            }
        }
        MutationOp::Insert => {
            if buf.len() < max_len {
                let i = rng.gen_range(0..=buf.len());
                buf.insert(i, random_byte(rng));
            }
        }
        MutationOp::Delete => {
            if !buf.is_empty() {
                let i = rng.gen_range(0..buf.len());
                buf.remove(i);
            }
        }
        MutationOp::Splice => {
            if let Some(p) = partner {
                let a = rng.gen_range(0..=buf.len());
                let b = rng.gen_range(0..=p.len());
                buf.truncate(a);
                buf.extend_from_slice(&p[b..]);
            }
        }
    }
    buf.truncate(max_len);
}

/// Child of `parent`: 1 to [`MAX_STACK`] ops drawn from `ops`, length
/// clamped to `max_len`.
pub fn mutate<R: Rng + ?Sized>(
    parent: &[u8],
    partner: Option<&[u8]>,
    max_len: usize,
    ops: &[MutationOp],
    rng: &mut R,
) -> Vec<u8> {
    let mut child = parent.to_vec();
    child.truncate(max_len);
    if ops.is_empty() {
        return child;
    }
    let n = rng.gen_range(1..=MAX_STACK);
    for _ in 0..n {
        let op = *ops.choose(rng).unwrap();
        apply_op(op, &mut child, partner, max_len, rng);
    }
    child
}

/// Architectural branch edges and their hit counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CoverageMap {
    pub edges: BTreeMap<(Loc, bool), u64>,
}

impl CoverageMap {
    /// Counts a hit; returns whether the edge is new. Speculative hits are
    /// ignored.
    pub fn update(&mut self, edge: (Loc, bool), in_speculation: bool) -> bool {
        if in_speculation {
            return false;
        }
        let c = self.edges.entry(edge).or_insert(0);
        *c += 1;
        *c == 1
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Reason {
    Seed,
    NewEdge,
    NewVuln,
}

impl Reason {
    pub fn name(self) -> &'static str {
        match self {
            Reason::Seed => "seed",
            Reason::NewEdge => "new-edge",
            Reason::NewVuln => "new-vuln",
        }
    }

    pub fn from_name(s: &str) -> Option<Reason> {
        [Reason::Seed, Reason::NewEdge, Reason::NewVuln].into_iter().find(|r| r.name() == s)
    }
}

/// Records of one run with duplicates removed: one record per
/// (dedup key, branch sequence), first occurrence wins.
pub fn run_records(trace: &RunTrace, mode: IdentityMode) -> Vec<&ViolationRecord> {
    let mut seen = BTreeSet::new();
    trace.violations.iter().filter(|v| seen.insert((dedup_key(v, mode), v.branches.clone()))).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusEntry {
    pub id: InputId,
    pub bytes: Vec<u8>,
    pub reason: Reason,
    /// Keys first seen on this entry's run.
    pub new_keys: Vec<DedupKey>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuzzConfig {
    pub seed: u64,
    pub max_runs: u64,
    pub max_len: usize,
    pub ops: Vec<MutationOp>,
    pub workers: usize,
    pub identity: IdentityMode,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            seed: 0,
            max_runs: 10_000,
            max_len: 64,
            ops: MutationOp::ALL.to_vec(),
            workers: 1,
            identity: IdentityMode::Offset,
        }
    }
}

/// Outcome of absorbing one run into the campaign state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Absorbed {
    pub id: InputId,
    pub kept: Option<Reason>,
    pub crash: Option<Fault>,
    pub new_edges: usize,
    pub new_keys: Vec<DedupKey>,
}

/// Corpus, coverage and vulnerability feedback.
#[derive(Clone, Debug, Default)]
pub struct FuzzState {
    pub corpus: Vec<CorpusEntry>,
    ids: BTreeSet<InputId>,
    pub coverage: CoverageMap,
    pub keys: BTreeSet<DedupKey>,
    pub runs: u64,
    pub crashes: u64,
}

impl FuzzState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: InputId) -> bool {
        self.ids.contains(&id)
    }

    /// Parent and partner drawn uniformly, then mutated.
    pub fn next_child<R: Rng + ?Sized>(&self, cfg: &FuzzConfig, rng: &mut R) -> Vec<u8> {
        let parent = &self.corpus[rng.gen_range(0..self.corpus.len())].bytes;
        let partner = &self.corpus[rng.gen_range(0..self.corpus.len())].bytes;
        mutate(parent, Some(partner), cfg.max_len, &cfg.ops, rng)
    }

    /// Folds one run into coverage and feedback; keeps the input if it
    /// found something new (seeds are always kept).
    pub fn absorb(&mut self, input: &[u8], x: &Exposure, mode: IdentityMode, seed: bool) -> Absorbed {
        self.runs += 1;
        let id = InputId::of(input);
        let mut new_edges = 0;
        for (edge, hits) in &x.trace.edges {
            let fresh = !self.coverage.edges.contains_key(edge);
            *self.coverage.edges.entry(*edge).or_insert(0) += hits;
            new_edges += usize::from(fresh);
        }
        let mut new_keys = Vec::new();
        for v in &x.trace.violations {
            let k = dedup_key(v, mode);
            if self.keys.insert(k) {
                new_keys.push(k);
            }
        }
        let crash = x.result.fault;
        self.crashes += u64::from(crash.is_some());
        let reason = if seed {
            Some(Reason::Seed)
        } else if crash.is_some() {
            None
        } else if !new_keys.is_empty() {
            Some(Reason::NewVuln)
        } else if new_edges > 0 {
            Some(Reason::NewEdge)
        } else {
            None
        };
        let kept = match reason {
            Some(r) if self.ids.insert(id) => {
                self.corpus.push(CorpusEntry { id, bytes: input.to_vec(), reason: r, new_keys: new_keys.clone() });
                Some(r)
            }
            _ => None,
        };
        Absorbed { id, kept, crash, new_edges, new_keys }
    }
}

/// One completed run, as reported to a [`RunSink`].
pub struct RunEvent<'a> {
    pub run: u64,
    pub input: &'a [u8],
    pub exposure: &'a Exposure,
    pub absorbed: &'a Absorbed,
}

pub trait RunSink {
    type Error;
    fn on_run(&mut self, event: &RunEvent<'_>) -> Result<(), Self::Error>;
}

/// Discards events.
pub struct NullSink;

impl RunSink for NullSink {
    type Error = core::convert::Infallible;
    fn on_run(&mut self, _event: &RunEvent<'_>) -> Result<(), Self::Error> {
        Ok(())
    }
}

#[derive(Debug)]
pub enum CampaignError<E> {
    Engine(EngineError),
    Sink(E),
}

impl<E: fmt::Display> fmt::Display for CampaignError<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CampaignError::Engine(e) => write!(f, "engine: {e}"),
            CampaignError::Sink(e) => write!(f, "{e}"),
        }
    }
}

/// Single-threaded campaign: every seed runs first, then mutated children
/// until `cfg.max_runs` runs have been made. An empty seed list is
/// replaced by the empty input.
#[allow(clippy::too_many_arguments)]
pub fn fuzz_loop<S: RunSink>(
    image: &Image<'_>,
    seeds: &[Vec<u8>],
    state: &mut FuzzState,
    stats: &mut dyn BranchCounter,
    cfg: &FuzzConfig,
    spec: &SpecConfig,
    vm: &VmConfig,
    sink: &mut S,
) -> Result<(), CampaignError<S::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let empty = [Vec::new()];
    let seeds = if seeds.is_empty() && state.corpus.is_empty() { &empty[..] } else { seeds };
    let mut one = |state: &mut FuzzState, input: &[u8], seed: bool, sink: &mut S| {
        let x = run_with_exposure(image, input, vm, spec, stats).map_err(CampaignError::Engine)?;
        let absorbed = state.absorb(input, &x, cfg.identity, seed);
        let event = RunEvent { run: state.runs, input, exposure: &x, absorbed: &absorbed };
        sink.on_run(&event).map_err(CampaignError::Sink)
    };
    for s in seeds {
        let mut s = s.clone();
        s.truncate(cfg.max_len);
        one(state, &s, true, sink)?;
    }
    if state.corpus.is_empty() {
        // Every seed crashed; fall back to the empty input as a parent.
        state.corpus.push(CorpusEntry { id: InputId::of(&[]), bytes: Vec::new(), reason: Reason::Seed, new_keys: Vec::new() });
    }
    while state.runs < cfg.max_runs {
        let child = state.next_child(cfg, &mut rng);
        one(state, &child, false, sink)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_into_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut buf = Vec::new();
        apply_op(MutationOp::Insert, &mut buf, None, 64, &mut rng);
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn mutate_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            mutate(b"AAAA", None, 64, &MutationOp::ALL, &mut rng)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn splice_joins_prefix_and_suffix() {
        let a = b"aaaaaaaa";
        let b = b"bbbbbbbb";
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut buf = a.to_vec();
            apply_op(MutationOp::Splice, &mut buf, Some(b), 64, &mut rng);
            let cut = buf.iter().position(|c| *c == b'b').unwrap_or(buf.len());
            assert!(buf[..cut].iter().all(|c| *c == b'a'));
            assert!(buf[cut..].iter().all(|c| *c == b'b'));
            assert!(a.starts_with(&buf[..cut]) && b.ends_with(&buf[cut..]));
        }
    }

    #[test]
    fn lengths_are_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = mutate(&[1; 10], Some(&[2; 10]), 12, &MutationOp::ALL, &mut rng);
            assert!(c.len() <= 12);
        }
    }

    #[test]
    fn coverage_update_semantics() {
        let mut cm = CoverageMap::default();
        let e = (Loc::new(0, 0, 3), true);
        assert!(!cm.update(e, true));
        assert!(cm.is_empty());
        assert!(cm.update(e, false));
        assert!(!cm.update(e, false));
        assert_eq!(cm.edges[&e], 2);
    }

    #[test]
    fn input_ids() {
        let id = InputId::of(b"");
        assert_eq!(alloc::format!("{id}"), "e3b0c44298fc1c14");
        assert_eq!("e3b0c44298fc1c14".parse::<InputId>().unwrap(), id);
    }
}
