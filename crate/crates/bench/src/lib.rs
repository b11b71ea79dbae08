//! Criterion benchmarks for the eqcam crate; see `benches/`.
