//! Criterion benchmarks for trajpool-core; see `benches/`.
