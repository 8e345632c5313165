//! Criterion benchmarks for the kvdistill kernels and training step.
//! See `benches/`.
