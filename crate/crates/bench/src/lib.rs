//! Criterion benchmarks for `seqseg-core`; see `benches/core.rs`.
