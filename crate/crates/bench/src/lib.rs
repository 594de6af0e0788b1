//! Criterion benchmarks for the solvers and the closed loop live in `benches/`.
