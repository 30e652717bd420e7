//! Criterion benchmarks for the hot training kernels live in `benches/`.
