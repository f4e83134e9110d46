//! Builtin gadget corpus.
//!
//! Ids 1 to 15 are translations of the classic bounds-check-bypass
//! variants; 16 and up are auxiliary shapes (table decoder, double check,
//! jump table, return slot overwrite, input-independent read). Each source
//! carries its metadata in header comments:
//!
//! ```text
//! ; trigger: 11          input bytes in hex
//! ; safe: 04
//! ; expect: main:body:2 DATA-OOB 1
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::asm::parse_program;
use crate::detect::ViolationKind;
use crate::isa::{InstructionId, Program};

const SOURCES: [&str; 20] = [
    include_str!("../gadgets/g01.sasm"),
    include_str!("../gadgets/g02.sasm"),
    include_str!("../gadgets/g03.sasm"),
    include_str!("../gadgets/g04.sasm"),
    include_str!("../gadgets/g05.sasm"),
    include_str!("../gadgets/g06.sasm"),
    include_str!("../gadgets/g07.sasm"),
    include_str!("../gadgets/g08.sasm"),
    include_str!("../gadgets/g09.sasm"),
    include_str!("../gadgets/g10.sasm"),
    include_str!("../gadgets/g11.sasm"),
    include_str!("../gadgets/g12.sasm"),
    include_str!("../gadgets/g13.sasm"),
    include_str!("../gadgets/g14.sasm"),
    include_str!("../gadgets/g15.sasm"),
    include_str!("../gadgets/g16.sasm"),
    include_str!("../gadgets/g17.sasm"),
    include_str!("../gadgets/g18.sasm"),
    include_str!("../gadgets/g19.sasm"),
    include_str!("../gadgets/g20.sasm"),
];

/// Ids of the 15 classic variants.
pub const KOCHER_IDS: core::ops::RangeInclusive<u32> = 1..=15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expected {
    pub offending: InstructionId,
    pub kind: ViolationKind,
    pub min_order: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GadgetFixture {
    pub id: u32,
    /// First header line, e.g. `gadget 1: basic`.
    pub title: String,
    pub source: &'static str,
    pub program: Program,
    pub trigger: Vec<u8>,
    pub safe: Vec<u8>,
    pub expected: Expected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown gadget {0}")]
pub struct UnknownGadget(pub u32);

pub fn gadget_ids() -> impl Iterator<Item = u32> {
    1..=SOURCES.len() as u32
}

pub fn gadget_source(id: u32) -> Result<&'static str, UnknownGadget> {
    let i = (id as usize).checked_sub(1).ok_or(UnknownGadget(id))?;
    SOURCES.get(i).copied().ok_or(UnknownGadget(id))
}

fn header<'a>(source: &'a str, key: &str) -> Option<&'a str> {
    source
        .lines()
        .filter_map(|l| l.trim().strip_prefix(';'))
        .find_map(|l| l.trim().strip_prefix(key)?.strip_prefix(':'))
        .map(str::trim)
}

fn hex_bytes(s: &str) -> Vec<u8> {
    s.split_whitespace()
        .map(|b| u8::from_str_radix(b, 16).expect("fixture bytes are hex"))
        .collect()
}

pub fn builtin_gadget(id: u32) -> Result<GadgetFixture, UnknownGadget> {
    let source = gadget_source(id)?;
    let program = parse_program(source).expect("builtin gadgets assemble");
    let title = source.lines().next().unwrap_or("").trim_start_matches(';').trim().into();
    let expect = header(source, "expect").expect("expect header");
    let mut parts = expect.split_whitespace();
    let (Some(loc), Some(kind), Some(order)) = (parts.next(), parts.next(), parts.next()) else {
        panic!("malformed expect header in gadget {id}");
    };
    let expected = Expected {
        offending: loc.parse().expect("expect location"),
        kind: ViolationKind::from_name(kind).expect("expect kind"),
        min_order: order.parse().expect("expect order"),
    };
    Ok(GadgetFixture {
        id,
        title,
        source,
        program,
        trigger: hex_bytes(header(source, "trigger").expect("trigger header")),
        safe: hex_bytes(header(source, "safe").expect("safe header")),
        expected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_fixtures_load_and_resolve() {
        for id in gadget_ids() {
            let g = builtin_gadget(id).unwrap();
            assert!(g.program.resolve(&g.expected.offending).is_some(), "gadget {id}");
            assert!(g.title.starts_with(&alloc::format!("gadget {id}:")), "{}", g.title);
        }
        assert_eq!(builtin_gadget(0), Err(UnknownGadget(0)));
        assert_eq!(builtin_gadget(21), Err(UnknownGadget(21)));
    }
}
