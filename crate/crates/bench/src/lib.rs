//! Criterion benchmarks for the network, flow and SGD kernels; see `benches/kernels.rs`.
