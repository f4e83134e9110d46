use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specvm_core::analyze::{
    aggregate, classify_controllability, merge, AnalysisCriteria, Controllability, Referent, TraceRecord,
};
use specvm_core::asm::{emit_text, parse_program};
use specvm_core::detect::{signature, IdentityMode, ViolationKind};
use specvm_core::fuzz::InputId;
use specvm_core::isa::{validate, InstructionId, Program};
use specvm_core::random::{random_input, random_program, GenConfig};
use specvm_core::spec::{allowed_order, run_with_exposure, BranchStats, Schedule, SpecConfig};
use specvm_core::vm::{AccessKind, Image, Layout, VmConfig};

fn program_and_input(seed: u64) -> (Program, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_program(&mut rng, GenConfig::default());
    let input = random_input(&mut rng, GenConfig::default());
    (p, input)
}

fn exposure_set(p: &Program, input: &[u8], window: u64, k: u32) -> BTreeSet<specvm_core::detect::Signature> {
    let image = Image::new(p, Layout::default());
    let cfg = SpecConfig { window, max_order: k, schedule: Schedule::Fixed, ..SpecConfig::default() };
    let vm = VmConfig { max_steps: 2_000, ..VmConfig::default() };
    let x = run_with_exposure(&image, input, &vm, &cfg, &mut BranchStats::default()).unwrap();
    x.trace.violations.iter().map(|v| signature(v, IdentityMode::Offset)).collect()
}

fn id(n: u8) -> InstructionId {
    InstructionId::new("main", format!("b{}", n % 4), u32::from(n % 3))
}

fn record((off, offset, input, branch): (u8, u8, u8, u8)) -> TraceRecord {
    TraceRecord {
        kind: ViolationKind::DataOob,
        offending: id(off),
        addr: 0x10_0000 + u64::from(offset),
        class: Some(AccessKind::Redzone),
        referent: Some(Referent { base: 0x10_0000, size: 8, site: id(0) }),
        offset: Some(i64::from(offset % 3)),
        detail: None,
        branches: vec![id(branch)],
        order: 1 + usize::from(branch % 2),
        input_id: InputId(u64::from(input)),
        run: 0,
    }
}

fn records() -> impl Strategy<Value = Vec<TraceRecord>> {
    prop::collection::vec(any::<(u8, u8, u8, u8)>().prop_map(record), 0..300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn parse_emit_round_trip(seed in any::<u64>()) {
        let (p, _) = program_and_input(seed);
        prop_assert!(validate(&p).is_empty());
        prop_assert_eq!(parse_program(&emit_text(&p)).unwrap(), p);
    }

    #[test]
    fn window_monotonicity(seed in any::<u64>(), w in 4u64..120, extra in 1u64..120, k in 1u32..=3) {
        let (p, input) = program_and_input(seed);
        let small = exposure_set(&p, &input, w, k);
        let large = exposure_set(&p, &input, w + extra, k);
        prop_assert!(small.is_subset(&large), "{:?} vs {:?}", small, large);
    }

    #[test]
    fn depth_and_redzone_invariants(seed in any::<u64>(), k in 1u32..=3) {
        let (p, input) = program_and_input(seed);
        let image = Image::new(&p, Layout::default());
        let cfg = SpecConfig { max_order: k, schedule: Schedule::Fixed, ..SpecConfig::default() };
        let vm = VmConfig { max_steps: 2_000, ..VmConfig::default() };
        let x = run_with_exposure(&image, &input, &vm, &cfg, &mut BranchStats::default()).unwrap();
        for v in &x.trace.violations {
            prop_assert!(v.order() >= 1 && v.order() <= k as usize);
            if let Some(c) = v.class {
                if c.kind == AccessKind::Redzone {
                    let r = c.referent.unwrap();
                    prop_assert_eq!(r.base.wrapping_add(c.offset.unwrap() as u64), v.addr);
                }
            }
        }
    }

    #[test]
    fn aggregate_is_associative(a in records(), b in records()) {
        let mode = IdentityMode::Offset;
        let all: Vec<_> = a.iter().chain(&b).cloned().collect();
        prop_assert_eq!(aggregate(&all, mode), merge(aggregate(&a, mode), aggregate(&b, mode)));
    }

    #[test]
    fn classification_is_monotone(a in records(), b in records(), threshold in 1u64..40) {
        let c = AnalysisCriteria { min_vuln_triggers: threshold, ..AnalysisCriteria::default() };
        let mode = IdentityMode::Offset;
        let before = aggregate(&a, mode);
        let all: Vec<_> = a.iter().chain(&b).cloned().collect();
        let after = aggregate(&all, mode);
        for f in &before {
            let g = after.iter().find(|g| g.offending == f.offending && g.kind == f.kind).unwrap();
            let (x, y) = (classify_controllability(f, &c), classify_controllability(g, &c));
            let allowed = x == y
                || x == Controllability::Unknown
                || (x == Controllability::Uncontrolled && y == Controllability::Controlled);
            prop_assert!(allowed, "{:?} -> {:?}", x, y);
        }
    }
}

#[test]
fn schedule_exactness() {
    let cfg = SpecConfig::default();
    let orders: Vec<u32> = (1..=1024).map(|n| allowed_order(n, &cfg)).collect();
    assert_eq!(orders.iter().filter(|o| **o >= 2).count(), 256);
    assert_eq!(orders.iter().filter(|o| **o >= 3).count(), 64);
    assert!(orders.iter().all(|o| (1..=6).contains(o)));
}
