//! Criterion benchmarks for the sparse kernels, dense retrieval and the
//! follow step. See `benches/`.
