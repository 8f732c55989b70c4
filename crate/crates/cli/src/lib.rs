//! Library surface of the benchmark harness: configuration, the seeded
//! Monte-Carlo runner, record serialization, and the invariant suite. The
//! `riscade` binary is a thin CLI over these modules.

pub mod config;
pub mod records;
pub mod runner;
pub mod selftest;
