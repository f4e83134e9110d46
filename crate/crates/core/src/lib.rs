//! Core of a toy register-machine VM that exposes speculative execution to
//! dynamic testing: ISA and assembler, interpreter, speculation engine,
//! violation detection, an exhaustive oracle, fuzzing primitives, trace
//! analysis, hardening passes and a builtin gadget corpus.
#![cfg_attr(not(test), no_std)]
extern crate alloc;

pub mod analyze;
pub mod asm;
pub mod detect;
pub mod fixtures;
pub mod fuzz;
pub mod harden;
pub mod isa;
pub mod oracle;
pub mod random;
pub mod spec;
pub mod vm;
