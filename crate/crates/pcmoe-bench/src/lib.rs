//! Benchmark-only package; see `benches/runtime.rs`.
