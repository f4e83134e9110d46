//! Trace aggregation, controllability, whitelists and reports.
//!
//! Everything here works on named records ([`TraceRecord`]) so traces can
//! be analyzed without re-running the program.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::detect::{CodeDetail, IdentityMode, ViolationKind, ViolationRecord};
use crate::fuzz::InputId;
use crate::isa::{InstructionId, Program};
use crate::vm::AccessKind;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Referent {
    pub base: u64,
    pub size: u64,
    /// ALLOC instruction that created the object.
    pub site: InstructionId,
}

/// One line of a trace file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub kind: ViolationKind,
    pub offending: InstructionId,
    pub addr: u64,
    pub class: Option<AccessKind>,
    pub referent: Option<Referent>,
    pub offset: Option<i64>,
    pub detail: Option<CodeDetail>,
    pub branches: Vec<InstructionId>,
    pub order: usize,
    pub input_id: InputId,
    pub run: u64,
}

impl TraceRecord {
    pub fn from_violation(v: &ViolationRecord, p: &Program, input_id: InputId, run: u64) -> TraceRecord {
        let referent = v.class.and_then(|c| c.referent).map(|r| Referent { base: r.base, size: r.size, site: p.id_of(r.site) });
        TraceRecord {
            kind: v.kind,
            offending: p.id_of(v.offending),
            addr: v.addr,
            class: v.class.map(|c| c.kind),
            referent,
            offset: v.class.and_then(|c| c.offset),
            detail: v.code,
            branches: v.branches.iter().map(|b| p.id_of(*b)).collect(),
            order: v.order(),
            input_id,
            run,
        }
    }

    /// Named counterpart of [`crate::detect::dedup_key`]'s identity.
    pub fn signature(&self, mode: IdentityMode) -> Signature {
        match (mode, self.kind, &self.referent, self.offset) {
            (IdentityMode::Raw, _, _, _) => Signature::Address(self.addr),
            (IdentityMode::Offset, ViolationKind::CodePtr, _, _) => Signature::Code,
            (IdentityMode::Offset, _, Some(r), Some(offset)) => Signature::Offset { site: r.site.clone(), offset },
            _ => Signature::Address(self.addr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Signature {
    Offset { site: InstructionId, offset: i64 },
    Address(u64),
    Code,
}

impl core::fmt::Display for Signature {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Signature::Offset { site, offset } => write!(f, "{site}{offset:+}"),
            Signature::Address(a) => write!(f, "{a:#x}"),
            Signature::Code => f.write_str("code"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Controllability {
    Code,
    Controlled,
    Unknown,
    Uncontrolled,
}

impl Controllability {
    pub fn name(self) -> &'static str {
        match self {
            Controllability::Code => "CODE",
            Controllability::Controlled => "CONTROLLED",
            Controllability::Unknown => "UNKNOWN",
            Controllability::Uncontrolled => "UNCONTROLLED",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnalysisCriteria {
    pub min_branch_execs: u64,
    pub min_vuln_triggers: u64,
    pub uncontrolled_benign: bool,
}

impl Default for AnalysisCriteria {
    fn default() -> Self {
        AnalysisCriteria { min_branch_execs: 100, min_vuln_triggers: 100, uncontrolled_benign: true }
    }
}

/// All records of one (offending instruction, kind).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregatedFinding {
    pub offending: InstructionId,
    pub kind: ViolationKind,
    pub inputs: BTreeSet<InputId>,
    pub triggers: u64,
    pub min_order: usize,
    pub sequences: BTreeSet<Vec<InstructionId>>,
    pub signatures: BTreeSet<Signature>,
    /// Raw addresses (return slots and table indices for CODE-PTR).
    pub addresses: BTreeSet<u64>,
}

impl AggregatedFinding {
    pub fn distinct_inputs(&self) -> usize {
        self.inputs.len()
    }

    fn absorb(&mut self, other: AggregatedFinding) {
        self.inputs.extend(other.inputs);
        self.triggers += other.triggers;
        self.min_order = self.min_order.min(other.min_order);
        self.sequences.extend(other.sequences);
        self.signatures.extend(other.signatures);
        self.addresses.extend(other.addresses);
    }
}

pub type FindingKey = (InstructionId, ViolationKind);

/// Groups records by (offending, kind). The result is sorted by that key.
pub fn aggregate<'a>(records: impl IntoIterator<Item = &'a TraceRecord>, mode: IdentityMode) -> Vec<AggregatedFinding> {
    let mut groups: BTreeMap<FindingKey, AggregatedFinding> = BTreeMap::new();
    for r in records {
        let f = AggregatedFinding {
            offending: r.offending.clone(),
            kind: r.kind,
            inputs: [r.input_id].into(),
            triggers: 1,
            min_order: r.order,
            sequences: [r.branches.clone()].into(),
            signatures: [r.signature(mode)].into(),
            addresses: [r.addr].into(),
        };
        match groups.get_mut(&(r.offending.clone(), r.kind)) {
            Some(g) => g.absorb(f),
            None => {
                groups.insert((r.offending.clone(), r.kind), f);
            }
        }
    }
    groups.into_values().collect()
}

/// Merges two aggregations of disjoint trace shards.
pub fn merge(a: Vec<AggregatedFinding>, b: Vec<AggregatedFinding>) -> Vec<AggregatedFinding> {
    let mut groups: BTreeMap<FindingKey, AggregatedFinding> = BTreeMap::new();
    for f in a.into_iter().chain(b) {
        let key = (f.offending.clone(), f.kind);
        match groups.get_mut(&key) {
            Some(g) => g.absorb(f),
            None => {
                groups.insert(key, f);
            }
        }
    }
    groups.into_values().collect()
}

pub fn classify_controllability(f: &AggregatedFinding, c: &AnalysisCriteria) -> Controllability {
    if f.kind == ViolationKind::CodePtr {
        Controllability::Code
    } else if (f.distinct_inputs() as u64) < c.min_vuln_triggers {
        Controllability::Unknown
    } else if f.signatures.len() == 1 {
        Controllability::Uncontrolled
    } else {
        Controllability::Controlled
    }
}

/// Benign findings do not block whitelisting of their branches.
pub fn is_benign(f: &AggregatedFinding, c: &AnalysisCriteria) -> bool {
    c.uncontrolled_benign
        && classify_controllability(f, c) == Controllability::Uncontrolled
        && f.triggers >= c.min_vuln_triggers
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Whitelist {
    pub branches: BTreeSet<InstructionId>,
    /// Free-form description of how the list was built.
    pub provenance: String,
}

impl Whitelist {
    pub fn contains(&self, b: &InstructionId) -> bool {
        self.branches.contains(b)
    }
}

/// Branches executed at least `min_branch_execs` times that occur in no
/// non-benign finding's branch sequence.
pub fn build_whitelist(
    findings: &[AggregatedFinding],
    stats: &BTreeMap<InstructionId, u64>,
    c: &AnalysisCriteria,
) -> Whitelist {
    let tainted: BTreeSet<&InstructionId> = findings
        .iter()
        .filter(|f| !is_benign(f, c))
        .flat_map(|f| f.sequences.iter().flatten())
        .collect();
    let branches = stats
        .iter()
        .filter(|(b, n)| **n >= c.min_branch_execs && !tainted.contains(b))
        .map(|(b, _)| b.clone())
        .collect();
    let provenance = format!(
        "min_branch_execs={} min_vuln_triggers={} uncontrolled_benign={}",
        c.min_branch_execs, c.min_vuln_triggers, c.uncontrolled_benign
    );
    Whitelist { branches, provenance }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FindingReport {
    pub offending: InstructionId,
    pub kind: ViolationKind,
    pub controllability: Controllability,
    pub min_order: usize,
    pub triggers: u64,
    pub distinct_inputs: usize,
    pub signatures: Vec<Signature>,
    pub addresses: Vec<u64>,
    pub sequences: Vec<Vec<InstructionId>>,
    pub inputs: Vec<InputId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchReport {
    pub branch: InstructionId,
    pub executions: u64,
    /// Offending instructions of findings whose sequences contain the branch.
    pub vulnerabilities: Vec<InstructionId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub findings: Vec<FindingReport>,
    pub branches: Vec<BranchReport>,
}

/// Findings sorted by (severity, min order, location); branches in program
/// order, plus any branch named only in the stats.
pub fn render_report(
    findings: &[AggregatedFinding],
    stats: &BTreeMap<InstructionId, u64>,
    program: Option<&Program>,
    c: &AnalysisCriteria,
) -> Report {
    let mut out: Vec<FindingReport> = findings
        .iter()
        .map(|f| FindingReport {
            offending: f.offending.clone(),
            kind: f.kind,
            controllability: classify_controllability(f, c),
            min_order: f.min_order,
            triggers: f.triggers,
            distinct_inputs: f.distinct_inputs(),
            signatures: f.signatures.iter().cloned().collect(),
            addresses: f.addresses.iter().copied().collect(),
            sequences: f.sequences.iter().cloned().collect(),
            inputs: f.inputs.iter().copied().collect(),
        })
        .collect();
    out.sort_by(|a, b| {
        (a.controllability, a.min_order, &a.offending, a.kind).cmp(&(b.controllability, b.min_order, &b.offending, b.kind))
    });

    let mut names: Vec<InstructionId> = Vec::new();
    if let Some(p) = program {
        names.extend(p.branches().into_iter().map(|b| p.id_of(b)));
    }
    for b in stats.keys() {
        if !names.contains(b) {
            names.push(b.clone());
        }
    }
    let branches = names
        .into_iter()
        .map(|b| {
            let vulnerabilities = findings
                .iter()
                .filter(|f| f.sequences.iter().any(|s| s.contains(&b)))
                .map(|f| f.offending.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            BranchReport { executions: stats.get(&b).copied().unwrap_or(0), branch: b, vulnerabilities }
        })
        .collect();
    Report { findings: out, branches }
}

/// Number of signatures, sequences and inputs listed per finding in text.
const TEXT_LIMIT: usize = 8;

fn list<T: core::fmt::Display>(items: &[T]) -> String {
    let mut s = String::new();
    for (i, x) in items.iter().take(TEXT_LIMIT).enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{x}");
    }
    if items.len() > TEXT_LIMIT {
        let _ = write!(s, ", ... ({} total)", items.len());
    }
    s
}

pub fn render_text(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "findings: {}", r.findings.len());
    for f in &r.findings {
        let _ = writeln!(
            s,
            "\n{} {} {} min-order {} triggers {} inputs {}",
            f.offending,
            f.kind.name(),
            f.controllability.name(),
            f.min_order,
            f.triggers,
            f.distinct_inputs
        );
        let _ = writeln!(s, "  seen: {}", list(&f.signatures));
        let addrs: Vec<String> = f.addresses.iter().map(|a| format!("{a:#x}")).collect();
        let _ = writeln!(s, "  addresses: {}", list(&addrs));
        let seqs: Vec<String> = f
            .sequences
            .iter()
            .map(|q| q.iter().map(|b| format!("{b}")).collect::<Vec<_>>().join(" > "))
            .collect();
        let _ = writeln!(s, "  mispredicted: {}", list(&seqs));
        let _ = writeln!(s, "  inputs: {}", list(&f.inputs));
    }
    let _ = writeln!(s, "\nbranches: {}", r.branches.len());
    for b in &r.branches {
        let _ = writeln!(s, "  {} executed {} can-trigger [{}]", b.branch, b.executions, list(&b.vulnerabilities));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn id(s: &str) -> InstructionId {
        s.parse().unwrap()
    }

    pub(crate) fn rec(off: &str, offset: i64, input: u64, branches: &[&str], order: usize) -> TraceRecord {
        let site = id("main:entry:1");
        TraceRecord {
            kind: ViolationKind::DataOob,
            offending: id(off),
            addr: 0x10_0000u64.wrapping_add(offset as u64),
            class: Some(AccessKind::Redzone),
            referent: Some(Referent { base: 0x10_0000, size: 128, site }),
            offset: Some(offset),
            detail: None,
            branches: branches.iter().map(|b| id(b)).collect(),
            order,
            input_id: InputId(input),
            run: input,
        }
    }

    #[test]
    fn counting() {
        let rs = vec![
            rec("main:body:2", 136, 1, &["main:entry:4"], 1),
            rec("main:body:2", 136, 1, &["main:entry:4"], 1),
            rec("main:body:2", 144, 2, &["main:entry:4"], 1),
        ];
        let fs = aggregate(&rs, IdentityMode::Offset);
        assert_eq!(fs.len(), 1);
        assert_eq!((fs[0].distinct_inputs(), fs[0].triggers), (2, 3));
        assert!(aggregate(&[], IdentityMode::Offset).is_empty());
    }

    #[test]
    fn min_order_is_min() {
        let rs = vec![
            rec("main:body:2", 136, 1, &["a:b:0", "a:c:0", "a:d:0"], 3),
            rec("main:body:2", 136, 2, &["a:b:0"], 1),
            rec("main:body:2", 136, 3, &["a:b:0", "a:c:0"], 2),
        ];
        assert_eq!(aggregate(&rs, IdentityMode::Offset)[0].min_order, 1);
    }

    #[test]
    fn classification() {
        let c = AnalysisCriteria::default();
        let single: Vec<_> = (0..150).map(|i| rec("main:body:2", 16, i, &["main:e:1"], 1)).collect();
        assert_eq!(classify_controllability(&aggregate(&single, IdentityMode::Offset)[0], &c), Controllability::Uncontrolled);
        let multi: Vec<_> = (0..150).map(|i| rec("main:body:2", 8 + 8 * (i as i64 % 15), i, &["main:e:1"], 1)).collect();
        assert_eq!(classify_controllability(&aggregate(&multi, IdentityMode::Offset)[0], &c), Controllability::Controlled);
        let few: Vec<_> = (0..3).map(|i| rec("main:body:2", 16, i, &["main:e:1"], 1)).collect();
        assert_eq!(classify_controllability(&aggregate(&few, IdentityMode::Offset)[0], &c), Controllability::Unknown);
    }

    #[test]
    fn whitelist_rules() {
        let c = AnalysisCriteria::default();
        let benign: Vec<_> = (0..200).map(|i| rec("main:x:0", 16, i, &["main:safe:1"], 1)).collect();
        let controlled: Vec<_> = (0..200).map(|i| rec("main:y:0", i as i64, i, &["main:hot:1"], 1)).collect();
        let all: Vec<_> = benign.iter().chain(&controlled).cloned().collect();
        let fs = aggregate(&all, IdentityMode::Offset);
        let stats: BTreeMap<InstructionId, u64> =
            [(id("main:safe:1"), 500), (id("main:cold:1"), 50), (id("main:hot:1"), 10_000)].into();
        let w = build_whitelist(&fs, &stats, &c);
        assert_eq!(w.branches, [id("main:safe:1")].into());
        let strict = AnalysisCriteria { uncontrolled_benign: false, ..c };
        assert!(build_whitelist(&fs, &stats, &strict).branches.is_empty());
    }

    #[test]
    fn report_order_and_empty() {
        let c = AnalysisCriteria::default();
        let mut rs: Vec<_> = (0..150).map(|i| rec("main:u:0", 16, i, &["main:e:1"], 2)).collect();
        rs.push(rec("main:k:0", 16, 1, &["main:e:1"], 1));
        let mut code = rec("main:c:0", 0, 1, &["main:e:1"], 3);
        code.kind = ViolationKind::CodePtr;
        rs.push(code);
        let fs = aggregate(&rs, IdentityMode::Offset);
        let r = render_report(&fs, &[(id("main:e:1"), 300)].into(), None, &c);
        let order: Vec<_> = r.findings.iter().map(|f| f.controllability).collect();
        assert_eq!(order, [Controllability::Code, Controllability::Unknown, Controllability::Uncontrolled]);
        assert_eq!(r.branches[0].vulnerabilities.len(), 3);
        let empty = render_report(&[], &[(id("main:e:1"), 4)].into(), None, &c);
        assert!(empty.findings.is_empty());
        assert_eq!(empty.branches.len(), 1);
        assert!(render_text(&empty).contains("main:e:1 executed 4"));
    }
}
