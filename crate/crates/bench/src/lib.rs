//! Criterion benchmarks for the KL bounds and kernel assembly; run with
//! `cargo bench -p lvae-bench`.
