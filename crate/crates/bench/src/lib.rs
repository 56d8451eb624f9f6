//! Criterion benchmarks for the map pipeline; see `benches/`.
