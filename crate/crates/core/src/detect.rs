//! Violation records produced on speculative paths, and their identities.

use alloc::vec::Vec;

use crate::isa::Loc;
use crate::vm::{AccessClass, AccessKind, FaultKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    DataOob,
    CodePtr,
}

impl ViolationKind {
    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::DataOob => "DATA-OOB",
            ViolationKind::CodePtr => "CODE-PTR",
        }
    }

    pub fn from_name(s: &str) -> Option<ViolationKind> {
        match s {
            "DATA-OOB" => Some(ViolationKind::DataOob),
            "CODE-PTR" => Some(ViolationKind::CodePtr),
            _ => None,
        }
    }
}

/// What a code-pointer integrity check saw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CodeDetail {
    /// RET popped a value that is not an encoded instruction address.
    BadRet { value: u64 },
    /// JTAB index past the end of its table.
    BadJtab { index: u64, len: u64 },
}

/// One speculative violation.
///
/// For DATA-OOB, `addr` is the accessed address and `class` its
/// classification. For CODE-PTR, `addr` is the return slot (RET) or the
/// table index (JTAB) and `code` holds the detail.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ViolationRecord {
    pub kind: ViolationKind,
    pub offending: Loc,
    pub addr: u64,
    pub class: Option<AccessClass>,
    pub code: Option<CodeDetail>,
    /// Mispredicted branches, root first.
    pub branches: Vec<Loc>,
}

impl ViolationRecord {
    pub fn order(&self) -> usize {
        self.branches.len()
    }

    pub fn data(offending: Loc, addr: u64, class: AccessClass, branches: Vec<Loc>) -> Self {
        ViolationRecord { kind: ViolationKind::DataOob, offending, addr, class: Some(class), code: None, branches }
    }

    pub fn code(offending: Loc, addr: u64, code: CodeDetail, branches: Vec<Loc>) -> Self {
        ViolationRecord { kind: ViolationKind::CodePtr, offending, addr, class: None, code: Some(code), branches }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum IdentityMode {
    #[default]
    Offset,
    Raw,
}

impl IdentityMode {
    pub fn name(self) -> &'static str {
        match self {
            IdentityMode::Offset => "offset",
            IdentityMode::Raw => "raw",
        }
    }

    pub fn from_name(s: &str) -> Option<IdentityMode> {
        match s {
            "offset" => Some(IdentityMode::Offset),
            "raw" => Some(IdentityMode::Raw),
            _ => None,
        }
    }
}

/// The part of a key that says *what* was touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Identity {
    /// Referent named by its allocation site, plus the signed offset.
    Offset { site: Loc, offset: i64 },
    Address(u64),
    /// Offset-mode identity of code-pointer events.
    Code,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DedupKey {
    pub offending: Loc,
    pub kind: ViolationKind,
    pub identity: Identity,
}

pub fn dedup_key(v: &ViolationRecord, mode: IdentityMode) -> DedupKey {
    let identity = match (mode, v.kind) {
        (IdentityMode::Raw, _) => Identity::Address(v.addr),
        (IdentityMode::Offset, ViolationKind::CodePtr) => Identity::Code,
        (IdentityMode::Offset, ViolationKind::DataOob) => match v.class {
            Some(AccessClass { referent: Some(r), offset: Some(offset), .. }) => {
                Identity::Offset { site: r.site, offset }
            }
            _ => Identity::Address(v.addr),
        },
    };
    DedupKey { offending: v.offending, kind: v.kind, identity }
}

/// A violation reduced to what engine/oracle agreement is stated over.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Signature {
    pub key: DedupKey,
    pub branches: Vec<Loc>,
}

pub fn signature(v: &ViolationRecord, mode: IdentityMode) -> Signature {
    Signature { key: dedup_key(v, mode), branches: v.branches.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessVerdict {
    Proceed,
    ProceedAfterRecord,
    RollbackAfterRecord,
}

/// Speculative-path treatment of a memory access.
pub fn on_speculative_access(class: &AccessClass) -> AccessVerdict {
    match class.kind {
        AccessKind::Valid | AccessKind::Scratch => AccessVerdict::Proceed,
        AccessKind::Redzone => AccessVerdict::ProceedAfterRecord,
        AccessKind::Unmapped => AccessVerdict::RollbackAfterRecord,
    }
}

/// Speculative-path treatment of a non-access fault: `Some` if it is a
/// recorded code-pointer event. Every fault rolls back.
pub fn on_speculative_fault(kind: &FaultKind) -> Option<CodeDetail> {
    match *kind {
        FaultKind::BadRet { value } => Some(CodeDetail::BadRet { value }),
        FaultKind::BadJtabIndex { index, len } => Some(CodeDetail::BadJtab { index, len }),
        _ => None,
    }
}

/// A speculative access the VM reported to a recording policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessHit {
    pub at: Loc,
    pub addr: u64,
    pub class: AccessClass,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::AllocRecord;
    use alloc::vec;

    fn rec(base: u64, offset: i64) -> ViolationRecord {
        let site = Loc::new(0, 0, 1);
        let r = AllocRecord { base, size: 128, live: true, site };
        let class = AccessClass { kind: AccessKind::Redzone, referent: Some(r), offset: Some(offset) };
        ViolationRecord::data(Loc::new(0, 2, 3), base.wrapping_add(offset as u64), class, vec![Loc::new(0, 0, 4)])
    }

    #[test]
    fn offset_identity_ignores_base() {
        let (a, b) = (rec(0x10_0000, 136), rec(0x10_1000, 136));
        assert_eq!(dedup_key(&a, IdentityMode::Offset), dedup_key(&b, IdentityMode::Offset));
        assert_ne!(dedup_key(&a, IdentityMode::Raw), dedup_key(&b, IdentityMode::Raw));
        assert_ne!(
            dedup_key(&rec(0x10_0000, 40), IdentityMode::Offset),
            dedup_key(&rec(0x10_0000, 48), IdentityMode::Offset)
        );
    }

    #[test]
    fn kinds_separate_keys() {
        let d = rec(0x10_0000, 136);
        let c = ViolationRecord::code(d.offending, d.addr, CodeDetail::BadRet { value: 3 }, d.branches.clone());
        assert_ne!(dedup_key(&d, IdentityMode::Offset), dedup_key(&c, IdentityMode::Offset));
        assert_ne!(dedup_key(&d, IdentityMode::Raw), dedup_key(&c, IdentityMode::Raw));
    }

    #[test]
    fn verdicts() {
        let c = |kind| AccessClass { kind, referent: None, offset: None };
        assert_eq!(on_speculative_access(&c(AccessKind::Valid)), AccessVerdict::Proceed);
        assert_eq!(on_speculative_access(&c(AccessKind::Scratch)), AccessVerdict::Proceed);
        assert_eq!(on_speculative_access(&c(AccessKind::Redzone)), AccessVerdict::ProceedAfterRecord);
        assert_eq!(on_speculative_access(&c(AccessKind::Unmapped)), AccessVerdict::RollbackAfterRecord);
        assert_eq!(on_speculative_fault(&FaultKind::DivZero), None);
        assert_eq!(on_speculative_fault(&FaultKind::StackOverflow), None);
        assert!(on_speculative_fault(&FaultKind::BadJtabIndex { index: 2, len: 2 }).is_some());
    }
}
