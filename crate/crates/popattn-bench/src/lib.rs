//! Benchmark-only crate: see `benches/pipeline.rs` for the criterion
//! benchmarks covering the numeric hot paths (dense matmul, LSTM forward and
//! backward, one Gibbs sweep of the topic sampler, k-means, and a full
//! dual-attention forward pass).
