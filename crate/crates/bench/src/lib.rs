//! Criterion benchmarks for the simulation and quadrature kernels; see `benches/kernels.rs`.
