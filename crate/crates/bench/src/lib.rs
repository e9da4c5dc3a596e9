//! Criterion benchmarks for promptforge; see `benches/`.
