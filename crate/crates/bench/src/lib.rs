//! Criterion benchmarks for the convolution kernels, network passes, losses,
//! matching and extraction; see `benches/`.
