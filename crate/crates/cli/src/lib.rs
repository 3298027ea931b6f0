//! Benchmark scenarios and helpers behind the `fanout` command.

pub mod bench;
