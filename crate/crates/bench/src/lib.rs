//! Criterion benchmarks for the OUI metric and the training step; see `benches/`.
