//! Dynamic deadlock prediction from execution traces.
//!
//! Phase 1 replays a trace once, computing per-thread vector clocks under a
//! release-order partial order and collecting lock dependencies (thread,
//! requested lock, locks held). Phase 2 connects the dependencies into
//! cyclic chains, checks each chain for a pairwise-concurrent concrete
//! instance, and discards patterns whose requests another reported pattern
//! provably blocks. Small-trace brute-force referees live in `oracle`; the
//! deterministic trace generator in `fuzz` feeds the property tests.

pub mod cli;
pub mod engine;
pub mod fuzz;
pub mod oracle;
pub mod report;
pub mod search;
pub mod trace;
pub mod vclock;
