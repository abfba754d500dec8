//! Criterion benchmarks for the nopvis pipeline; see `benches/`.
