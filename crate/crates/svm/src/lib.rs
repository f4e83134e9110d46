//! File formats, fuzzing sessions and the `svm` command line on top of
//! `specvm_core`.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod report;
pub mod session;
pub mod trace;
pub mod whitelist;
