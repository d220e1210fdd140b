//! Criterion benchmarks for the diazoflow forward model; see `benches/`.
