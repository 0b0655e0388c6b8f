//! Library side of the `promptveil` command: the latency benchmark and the
//! statistics used to read its output.

pub mod bench;
pub mod stats;
